//! Mode seeking on a Gaussian mixture with the non-isotropic mean-shift map
//!
//! ```text
//! T(x) = Σ̄(x) · Σ_g w_g(x) Σ_g⁻¹ μ_g,     Σ̄(x) = {Σ_g w_g(x) Σ_g⁻¹}⁻¹
//! ```
//!
//! which coincides with the quasi-Newton step `x + Σ̄(x)·Df(x)/f(x)`.
//! Iterating `T` never decreases the density; [`ascend`] checks this at every
//! step. Tolerances are expressed relative to the mixture's
//! [`data_scale`](GaussianMixture::data_scale).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian;
use crate::mixture::{softmax_in_place, GaussianMixture};

/// Registered modes satisfy `‖Df/f‖·scale` below this.
pub const MODE_GRADIENT_TOL: f64 = 1e-5;
/// Largest Hessian eigenvalue (of `D²f/f`, times `scale²`) still treated as a
/// maximum rather than a saddle.
const SADDLE_CURVATURE_TOL: f64 = 1e-6;
const ASCENT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftConfig {
    /// Stop when a step is shorter than `step_tol · data_scale`.
    pub step_tol: f64,
    pub max_iterations: usize,
    /// Terminal points closer than `mode_merge_tol · data_scale` share a mode.
    pub mode_merge_tol: f64,
    /// Stop early when `‖Df/f‖ · data_scale` falls below this.
    pub gradient_stall_tol: f64,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        Self {
            step_tol: 1e-8,
            max_iterations: 1000,
            mode_merge_tol: 1e-3,
            gradient_stall_tol: 1e-10,
        }
    }
}

impl MeanShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_tol > 0.0
            && self.mode_merge_tol > 0.0
            && self.gradient_stall_tol > 0.0
            && self.max_iterations > 0)
        {
            return Err(Error::InvalidArgument(
                "mean-shift tolerances and iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unresolved {
    MaxIterations,
    /// Stopped at a stationary point with an ascent direction (saddle).
    Saddle,
    /// Steps became tiny while the gradient did not vanish.
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AscentOutcome {
    Converged,
    Unresolved(Unresolved),
}

impl AscentOutcome {
    pub fn is_converged(&self) -> bool {
        matches!(self, AscentOutcome::Converged)
    }
}

/// The iterates `y_0 = start, y_{j+1} = T(y_j)` of one ascent.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub start: DVector<f64>,
    pub iterates: Vec<DVector<f64>>,
    pub outcome: AscentOutcome,
    /// Index into the [`ModeSet`] once registered by [`find_modes`].
    pub terminal_mode_index: Option<usize>,
    steps: usize,
}

impl Trajectory {
    pub fn terminal(&self) -> &DVector<f64> {
        self.iterates.last().unwrap_or(&self.start)
    }

    /// Number of applications of `T`.
    pub fn iterations(&self) -> usize {
        self.steps
    }
}

/// Deduplicated modes of a mixture, in registration order.
#[derive(Debug, Clone)]
pub struct ModeSet {
    pub modes: Vec<DVector<f64>>,
    pub densities: Vec<f64>,
    pub data_scale: f64,
    /// Absolute merge radius, `mode_merge_tol · data_scale`.
    pub merge_radius: f64,
}

impl ModeSet {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Index of the first registered mode within the merge radius of `x`.
    pub fn lookup(&self, x: &DVector<f64>) -> Option<usize> {
        self.modes
            .iter()
            .position(|m| (m - x).norm() < self.merge_radius)
    }
}

fn check_dim(mixture: &GaussianMixture, x: &DVector<f64>) -> Result<()> {
    if x.len() != mixture.dimension() {
        return Err(Error::DimensionMismatch {
            expected: mixture.dimension(),
            found: x.len(),
        });
    }
    Ok(())
}

/// State of the map at one point: responsibilities folded into the
/// precision sum `P = Σ w_g Σ_g⁻¹` and `b = Σ w_g Σ_g⁻¹ μ_g`.
struct ShiftState {
    precision: DMatrix<f64>,
    target: DVector<f64>,
    log_density: f64,
}

impl ShiftState {
    fn at(
        mixture: &GaussianMixture,
        x: &DVector<f64>,
        scratch: &mut [f64],
        terms: &mut [f64],
    ) -> Self {
        mixture.log_terms_slice(x.as_slice(), scratch, terms);
        let log_density = softmax_in_place(terms);
        Self {
            precision: mixture.weighted_precision(terms),
            target: mixture.weighted_precision_mean(terms),
            log_density,
        }
    }

    /// `Df(x)/f(x) = b − P·x`
    fn log_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.target - &self.precision * x
    }

    fn shifted(&self) -> Result<DVector<f64>> {
        gaussian::factorize(&self.precision)?.solve(&self.target)
    }
}

/// `T(x)`, evaluated in responsibility form.
pub fn shift_map(mixture: &GaussianMixture, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(mixture, x)?;
    let mut scratch = vec![0.0; mixture.dimension()];
    let mut terms = vec![0.0; mixture.n_components()];
    ShiftState::at(mixture, x, &mut scratch, &mut terms).shifted()
}

/// `x + Σ̄(x)·Df(x)/f(x)`, assembled from the mixture's gradient, density
/// and harmonic-mean covariance. Equal to [`shift_map`] up to rounding.
pub fn quasi_newton_step(mixture: &GaussianMixture, x: &DVector<f64>) -> Result<DVector<f64>> {
    let sigma_bar = mixture.harmonic_mean_covariance(x)?;
    let f = mixture.density(x)?;
    let direction = if f > 0.0 && f.is_finite() {
        mixture.gradient(x)? / f
    } else {
        mixture.log_gradient(x)?
    };
    Ok(x + sigma_bar * direction)
}

/// Iterates `T` from `x0` until the step falls below `step_tol·data_scale`.
///
/// A trajectory that hits `max_iterations`, stops at a saddle, or stalls
/// without a vanishing gradient comes back `Unresolved`. A density decrease
/// along the way is an [`Error::AscentViolation`].
pub fn ascend(
    mixture: &GaussianMixture,
    x0: &DVector<f64>,
    config: &MeanShiftConfig,
) -> Result<Trajectory> {
    config.validate()?;
    check_dim(mixture, x0)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("start point is not finite".into()));
    }
    ascend_with_scale(mixture, x0, config, mixture.data_scale(), true)
}

fn ascend_with_scale(
    mixture: &GaussianMixture,
    x0: &DVector<f64>,
    config: &MeanShiftConfig,
    scale: f64,
    record: bool,
) -> Result<Trajectory> {
    let mut scratch = vec![0.0; mixture.dimension()];
    let mut terms = vec![0.0; mixture.n_components()];
    let mut iterates = vec![x0.clone()];
    let mut y = x0.clone();
    let mut state = ShiftState::at(mixture, &y, &mut scratch, &mut terms);
    let mut outcome = None;
    let mut steps = 0;
    for j in 0..config.max_iterations {
        if state.log_gradient(&y).norm() * scale < config.gradient_stall_tol {
            break;
        }
        let next = state.shifted()?;
        let step = (&next - &y).norm();
        let next_state = ShiftState::at(mixture, &next, &mut scratch, &mut terms);
        let (before, after) = (state.log_density.exp(), next_state.log_density.exp());
        if after < before - ASCENT_SLACK * before.max(1.0) {
            return Err(Error::AscentViolation {
                iteration: j + 1,
                before,
                after,
            });
        }
        y = next;
        state = next_state;
        steps += 1;
        if record {
            iterates.push(y.clone());
        }
        if step < config.step_tol * scale {
            break;
        }
        if j + 1 == config.max_iterations {
            outcome = Some(AscentOutcome::Unresolved(Unresolved::MaxIterations));
        }
    }
    let outcome = match outcome {
        Some(o) => o,
        None => classify_stationary(mixture, &y, &state, scale)?,
    };
    if !record && steps > 0 {
        iterates.push(y);
    }
    Ok(Trajectory {
        start: x0.clone(),
        iterates,
        outcome,
        terminal_mode_index: None,
        steps,
    })
}

/// Gradient test, then a Hessian test separating maxima from saddles.
fn classify_stationary(
    mixture: &GaussianMixture,
    y: &DVector<f64>,
    state: &ShiftState,
    scale: f64,
) -> Result<AscentOutcome> {
    if state.log_gradient(y).norm() * scale >= MODE_GRADIENT_TOL {
        return Ok(AscentOutcome::Unresolved(Unresolved::Stalled));
    }
    let hessian = mixture.scaled_hessian(y)?;
    let top = SymmetricEigen::new(hessian)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if top * scale * scale > SADDLE_CURVATURE_TOL {
        return Ok(AscentOutcome::Unresolved(Unresolved::Saddle));
    }
    Ok(AscentOutcome::Converged)
}

/// Result of [`find_modes`]: the modes plus, per start, where it ended.
#[derive(Debug, Clone)]
pub struct ModeSearch {
    pub modes: ModeSet,
    /// Mode index per start; `None` for unresolved trajectories.
    pub assignment: Vec<Option<usize>>,
    pub terminals: Vec<DVector<f64>>,
    pub outcomes: Vec<AscentOutcome>,
    pub iterations: Vec<usize>,
}

impl ModeSearch {
    pub fn unresolved(&self) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.is_none().then_some(i))
            .collect()
    }
}

/// Ascends from every start and registers terminal points as modes.
///
/// Registration runs in start order: a terminal point within the merge
/// radius of an existing mode joins it (first registered wins), otherwise
/// it becomes a new mode. Unresolved starts are reported, not fatal.
pub fn find_modes(
    mixture: &GaussianMixture,
    starts: &[DVector<f64>],
    config: &MeanShiftConfig,
) -> Result<ModeSearch> {
    config.validate()?;
    if starts.is_empty() {
        return Err(Error::InvalidArgument("no starting points".into()));
    }
    for s in starts {
        check_dim(mixture, s)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("start point is not finite".into()));
        }
    }
    let scale = mixture.data_scale();
    let trajectories: Vec<Trajectory> = starts
        .par_iter()
        .map(|s| ascend_with_scale(mixture, s, config, scale, false))
        .collect::<Result<_>>()?;

    let mut modes = ModeSet {
        modes: Vec::new(),
        densities: Vec::new(),
        data_scale: scale,
        merge_radius: config.mode_merge_tol * scale,
    };
    let mut assignment = Vec::with_capacity(starts.len());
    for t in &trajectories {
        if !t.outcome.is_converged() {
            assignment.push(None);
            continue;
        }
        let terminal = t.terminal();
        let idx = match modes.lookup(terminal) {
            Some(i) => i,
            None => {
                modes.modes.push(terminal.clone());
                modes.densities.push(mixture.density(terminal)?);
                modes.len() - 1
            }
        };
        assignment.push(Some(idx));
    }
    Ok(ModeSearch {
        modes,
        assignment,
        terminals: trajectories.iter().map(|t| t.terminal().clone()).collect(),
        outcomes: trajectories.iter().map(|t| t.outcome).collect(),
        iterations: trajectories.iter().map(|t| t.iterations()).collect(),
    })
}
