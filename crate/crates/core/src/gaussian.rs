//! Multivariate normal primitives: Cholesky factorization with jitter
//! escalation, log-density through triangular solves, and seeded sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

const SYMMETRY_TOL: f64 = 1e-10;
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
/// Pivots at or below this fraction of the largest diagonal entry count as failures.
const PIVOT_FLOOR: f64 = 1e-14;

/// Lower-triangular Cholesky factor `L` of a covariance matrix, `Σ = L·Lᵀ`.
///
/// When the plain factorization fails, a diagonal jitter is added before
/// retrying; the amount actually added is kept in [`jitter`](Self::jitter),
/// and `L·Lᵀ` reconstructs the regularized matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceFactor {
    lower: DMatrix<f64>,
    log_det: f64,
    jitter: f64,
}

impl CovarianceFactor {
    pub fn dimension(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `ln |Σ|`, equal to `2·Σᵢ ln Lᵢᵢ`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Diagonal jitter added to make the factorization succeed (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L·Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    /// Overwrites `v` with `L⁻¹·v` (forward substitution).
    pub fn forward_solve_in_place(&self, v: &mut [f64]) {
        let d = self.dimension();
        debug_assert_eq!(v.len(), d);
        for i in 0..d {
            let mut acc = v[i];
            for j in 0..i {
                acc -= self.lower[(i, j)] * v[j];
            }
            v[i] = acc / self.lower[(i, i)];
        }
    }

    /// Overwrites `v` with `L⁻ᵀ·v` (backward substitution).
    pub fn backward_solve_in_place(&self, v: &mut [f64]) {
        let d = self.dimension();
        debug_assert_eq!(v.len(), d);
        for i in (0..d).rev() {
            let mut acc = v[i];
            for j in i + 1..d {
                acc -= self.lower[(j, i)] * v[j];
            }
            v[i] = acc / self.lower[(i, i)];
        }
    }

    /// `Σ⁻¹·b` via two triangular solves.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dimension(), b.len())?;
        let mut v = b.clone();
        self.forward_solve_in_place(v.as_mut_slice());
        self.backward_solve_in_place(v.as_mut_slice());
        Ok(v)
    }

    /// Squared Mahalanobis norm `diffᵀ Σ⁻¹ diff`. `diff` is used as scratch
    /// space and holds `L⁻¹·diff` on return.
    pub fn mahalanobis_sq_in_place(&self, diff: &mut [f64]) -> f64 {
        self.forward_solve_in_place(diff);
        diff.iter().map(|z| z * z).sum()
    }

    /// Explicit `Σ⁻¹`. Only used where a precision matrix is itself the
    /// quantity of interest (precision-weighted sums).
    pub fn inverse(&self) -> DMatrix<f64> {
        let d = self.dimension();
        let mut inv = DMatrix::zeros(d, d);
        let mut col = vec![0.0; d];
        for k in 0..d {
            col.iter_mut().for_each(|c| *c = 0.0);
            col[k] = 1.0;
            self.forward_solve_in_place(&mut col);
            self.backward_solve_in_place(&mut col);
            for i in 0..d {
                inv[(i, k)] = col[i];
            }
        }
        // symmetrize away rounding
        let t = inv.transpose();
        (inv + t) * 0.5
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

fn try_cholesky(cov: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let d = cov.nrows();
    let max_diag = (0..d).map(|i| cov[(i, i)].abs()).fold(0.0, f64::max);
    let floor = PIVOT_FLOOR * (max_diag + jitter);
    let mut lower = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut pivot = cov[(j, j)] + jitter;
        for k in 0..j {
            pivot -= lower[(j, k)] * lower[(j, k)];
        }
        if !(pivot.is_finite() && pivot > floor) {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let root = pivot.sqrt();
        lower[(j, j)] = root;
        for i in j + 1..d {
            let mut acc = cov[(i, j)];
            for k in 0..j {
                acc -= lower[(i, k)] * lower[(j, k)];
            }
            lower[(i, j)] = acc / root;
        }
    }
    Ok(lower)
}

/// Cholesky-factorizes a symmetric positive definite matrix.
///
/// On pivot failure, retries with `1e-10·tr(Σ)/d` added to the diagonal,
/// escalating tenfold up to `1e-4·tr(Σ)/d` before giving up with
/// [`Error::NotPositiveDefinite`].
pub fn factorize(cov: &DMatrix<f64>) -> Result<CovarianceFactor> {
    let d = cov.nrows();
    if d == 0 {
        return Err(Error::InvalidArgument("empty covariance matrix".into()));
    }
    check_dim(d, cov.ncols())?;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "covariance has non-finite entries".into(),
        ));
    }
    let scale = cov.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0_f64;
    for i in 0..d {
        for j in 0..i {
            asym = asym.max((cov[(i, j)] - cov[(j, i)]).abs());
        }
    }
    if scale > 0.0 && asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym / scale));
    }

    let first_err = match try_cholesky(cov, 0.0) {
        Ok(lower) => return Ok(from_lower(lower, 0.0)),
        Err(e) => e,
    };
    let mean_diag = cov.trace() / d as f64;
    if !(mean_diag > 0.0) {
        return Err(first_err);
    }
    let mut jitter = JITTER_START * mean_diag;
    let limit = JITTER_MAX * mean_diag * (1.0 + 1e-9);
    let mut last_err = first_err;
    while jitter <= limit {
        match try_cholesky(cov, jitter) {
            Ok(lower) => return Ok(from_lower(lower, jitter)),
            Err(e) => last_err = e,
        }
        jitter *= 10.0;
    }
    Err(last_err)
}

fn from_lower(lower: DMatrix<f64>, jitter: f64) -> CovarianceFactor {
    let log_det = 2.0 * (0..lower.nrows()).map(|i| lower[(i, i)].ln()).sum::<f64>();
    CovarianceFactor {
        lower,
        log_det,
        jitter,
    }
}

/// Log-density of `N(mean, Σ)` at `x`, where `factor` factorizes `Σ`.
pub fn log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    factor: &CovarianceFactor,
) -> Result<f64> {
    let d = factor.dimension();
    check_dim(d, mean.len())?;
    check_dim(d, x.len())?;
    let mut diff: Vec<f64> = x.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
    let q = factor.mahalanobis_sq_in_place(&mut diff);
    Ok(-0.5 * (d as f64 * LN_2PI + factor.log_det() + q))
}

/// Density of `N(mean, Σ)` at `x`, exponentiated from [`log_density`].
pub fn density(x: &DVector<f64>, mean: &DVector<f64>, factor: &CovarianceFactor) -> Result<f64> {
    log_density(x, mean, factor).map(f64::exp)
}

/// Draws `count` rows `mean + L·z`, `z ~ N(0, I)`, from a seeded ChaCha stream.
pub fn sample(
    mean: &DVector<f64>,
    factor: &CovarianceFactor,
    count: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(mean, factor, count, &mut rng)
}

/// As [`sample`], drawing from a caller-supplied generator.
pub fn sample_with<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    factor: &CovarianceFactor,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = factor.dimension();
    check_dim(d, mean.len())?;
    if count == 0 {
        return Err(Error::InvalidArgument(
            "sample count must be positive".into(),
        ));
    }
    let mut out = DMatrix::zeros(count, d);
    let mut z = vec![0.0; d];
    for r in 0..count {
        draw_into(mean, factor, rng, &mut z, &mut out, r);
    }
    Ok(out)
}

pub(crate) fn draw_into<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    factor: &CovarianceFactor,
    rng: &mut R,
    z: &mut [f64],
    out: &mut DMatrix<f64>,
    row: usize,
) {
    let d = z.len();
    for v in z.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    for i in 0..d {
        let mut acc = mean[i];
        for j in 0..=i {
            acc += factor.lower[(i, j)] * z[j];
        }
        out[(row, i)] = acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use nalgebra::dvector;

    #[test]
    fn identity_factor() {
        let f = factorize(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(f.lower(), &DMatrix::<f64>::identity(2, 2));
        assert_eq!(f.log_det(), 0.0);
        assert_eq!(f.jitter(), 0.0);
    }

    #[test]
    fn diagonal_factor() {
        let f = factorize(&dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap();
        assert_eq!(f.lower(), &dmatrix![2.0, 0.0; 0.0, 3.0]);
        assert_relative_eq!(f.log_det(), 36f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn near_singular_correlation() {
        let cov = dmatrix![1.0, 0.999; 0.999, 1.0];
        let f = factorize(&cov).unwrap();
        // 2x2 cofactor expansion
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        assert_relative_eq!(f.log_det(), det.ln(), max_relative = 1e-12);
        assert_relative_eq!(
            f.log_det(),
            (1.0f64 - 0.999 * 0.999).ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn rank_deficient_gets_jitter() {
        let cov = dmatrix![1.0, 1.0; 1.0, 1.0];
        let f = factorize(&cov).unwrap();
        assert!(f.jitter() > 0.0);
        assert!(f.jitter() <= 1e-4);
    }

    #[test]
    fn indefinite_is_rejected() {
        let cov = dmatrix![1.0, 2.0; 2.0, 1.0];
        assert!(matches!(
            factorize(&cov),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn asymmetric_is_rejected() {
        let cov = dmatrix![1.0, 0.5; 0.4, 1.0];
        assert!(matches!(factorize(&cov), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn standard_normal_at_mean() {
        let f = factorize(&DMatrix::identity(1, 1)).unwrap();
        let v = log_density(&dvector![0.0], &dvector![0.0], &f).unwrap();
        assert_relative_eq!(v, -0.918_938_533_204_672_7, max_relative = 1e-15);
    }

    #[test]
    fn zero_quadratic_form() {
        let cov = dmatrix![2.0, 0.3; 0.3, 0.5];
        let f = factorize(&cov).unwrap();
        let mu = dvector![1.5, -2.0];
        let v = log_density(&mu, &mu, &f).unwrap();
        assert_relative_eq!(v, -LN_2PI - 0.5 * f.log_det(), max_relative = 1e-14);
    }

    #[test]
    fn explicit_inverse_oracle() {
        let f = factorize(&dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap();
        let v = log_density(&dvector![1.0, 1.0], &dvector![0.0, 0.0], &f).unwrap();
        // naive: explicit inverse diag(1/4, 1/9), det 36
        let naive = -LN_2PI - 0.5 * 36f64.ln() - 0.5 * (1.0 / 4.0 + 1.0 / 9.0);
        assert_relative_eq!(v, naive, max_relative = 1e-14);
    }

    #[test]
    fn dimension_mismatch() {
        let f = factorize(&DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            log_density(&dvector![0.0], &dvector![0.0, 0.0], &f),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_draw_with_identity_is_mean_plus_z() {
        let f = factorize(&DMatrix::identity(2, 2)).unwrap();
        let mu = dvector![3.0, -1.0];
        let x = sample(&mu, &f, 1, 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        assert_eq!(x[(0, 0)], 3.0 + z0);
        assert_eq!(x[(0, 1)], -1.0 + z1);
    }

    #[test]
    fn sample_moments() {
        let f = factorize(&DMatrix::identity(2, 2)).unwrap();
        let x = sample(&dvector![0.0, 0.0], &f, 10_000, 1).unwrap();
        for c in 0..2 {
            assert!(x.column(c).mean().abs() < 0.05);
        }

        let f = factorize(&dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap();
        let x = sample(&dvector![0.0, 0.0], &f, 10_000, 2).unwrap();
        for (c, want) in [4.0, 9.0].into_iter().enumerate() {
            let col = x.column(c);
            let m = col.mean();
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 10_000.0;
            assert!((var - want).abs() < 0.1 * want, "var {var} vs {want}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let f = factorize(&dmatrix![2.0, 0.5; 0.5, 1.0]).unwrap();
        let a = sample(&dvector![0.0, 1.0], &f, 50, 5).unwrap();
        let b = sample(&dvector![0.0, 1.0], &f, 50, 5).unwrap();
        assert_eq!(a, b);
        assert!(sample(&dvector![0.0, 1.0], &f, 0, 5).is_err());
    }

    #[test]
    fn inverse_and_solve_agree() {
        let cov = dmatrix![2.0, 0.5, 0.1; 0.5, 1.0, 0.2; 0.1, 0.2, 0.7];
        let f = factorize(&cov).unwrap();
        let inv = f.inverse();
        let id = &cov * &inv;
        assert!((id - DMatrix::identity(3, 3)).amax() < 1e-12);
        let b = dvector![1.0, -2.0, 0.5];
        let s = f.solve(&b).unwrap();
        assert!((&inv * &b - s).amax() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one_1d() {
        let f = factorize(&dmatrix![0.7]).unwrap();
        let mu = dvector![0.3];
        let h = 1e-3;
        let total: f64 = (-10_000..=10_000)
            .map(|i| density(&dvector![0.3 + i as f64 * h], &mu, &f).unwrap() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-3);
    }

    #[test]
    fn density_integrates_to_one_2d() {
        let cov = dmatrix![1.0, 0.4; 0.4, 0.5];
        let f = factorize(&cov).unwrap();
        let mu = dvector![0.0, 0.0];
        let h = 0.02;
        let mut total = 0.0;
        for i in -400..=400 {
            for j in -400..=400 {
                let x = dvector![i as f64 * h, j as f64 * h];
                total += density(&x, &mu, &f).unwrap() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pd_matrix(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
            prop::collection::vec(-2.0..2.0f64, d * d).prop_map(move |v| {
                let a = DMatrix::from_vec(d, d, v);
                &a * a.transpose() + DMatrix::identity(d, d) * 0.1
            })
        }

        proptest! {
            #[test]
            fn reconstruction(cov in (1usize..6).prop_flat_map(pd_matrix)) {
                let f = factorize(&cov).unwrap();
                prop_assert_eq!(f.jitter(), 0.0);
                let err = (f.reconstruct() - &cov).amax();
                prop_assert!(err < 1e-10 * cov.amax());
                for i in 0..f.dimension() {
                    prop_assert!(f.lower()[(i, i)] > 0.0);
                    for j in i + 1..f.dimension() {
                        prop_assert_eq!(f.lower()[(i, j)], 0.0);
                    }
                }
                let det = cov.clone().determinant();
                prop_assert!((f.log_det() - det.ln()).abs() <= 1e-9 * det.ln().abs().max(1.0));
            }

            #[test]
            fn maximized_at_mean(cov in pd_matrix(2), mx in -3.0..3.0f64, my in -3.0..3.0f64) {
                let f = factorize(&cov).unwrap();
                let mu = dvector![mx, my];
                let at_mean = log_density(&mu, &mu, &f).unwrap();
                let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
                for i in -20..=20 {
                    for j in -20..=20 {
                        let (dx, dy) = (i as f64 * 0.05, j as f64 * 0.05);
                        let v = log_density(&dvector![mx + dx, my + dy], &mu, &f).unwrap();
                        if v > best.0 {
                            best = (v, dx, dy);
                        }
                    }
                }
                prop_assert!(best.0 <= at_mean);
                prop_assert!(best.1 == 0.0 && best.2 == 0.0);
            }
        }
    }
}
