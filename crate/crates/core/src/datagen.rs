//! Named synthetic scenarios with known parameters, used for sampling test
//! data and for ground-truth modal labels.

use nalgebra::{dmatrix, dvector, DMatrix};

use crate::clustering::{self, Clustering};
use crate::error::{Error, Result};
use crate::meanshift::MeanShiftConfig;
use crate::mixture::GaussianMixture;

#[derive(Debug, Clone)]
pub struct NamedScenario {
    pub name: &'static str,
    pub mixture: GaussianMixture,
    pub notes: &'static str,
}

/// Names accepted by [`scenario_by_name`].
pub const SCENARIO_NAMES: &[&str] = &["overlapping", "trimodal", "normal"];

/// Six-component bivariate mixture with four modes: two elliptical groups
/// and two cross-shaped groups built from coincident means.
///
/// With `A = diag(1, 0.1)`, `B = diag(0.1, 1)` and `R` the rotation by 60°:
/// weights `(0.2, 0.2, 0.2, 0.2, 0.1, 0.1)`, means `(0,0), (8,5), (1,5),
/// (1,5), (8,0), (8,0)`, covariances `RARᵀ, RᵀAR, B, A, B, A`.
pub fn overlapping_components() -> NamedScenario {
    let a = dmatrix![1.0, 0.0; 0.0, 0.1];
    let b = dmatrix![0.1, 0.0; 0.0, 1.0];
    let s3 = 3f64.sqrt();
    let r: DMatrix<f64> = dmatrix![1.0, -s3; s3, 1.0] * 0.5;
    let rt = r.transpose();
    let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    let covs = [
        sym(&r * &a * &rt),
        sym(&rt * &a * &r),
        b.clone(),
        a.clone(),
        b,
        a,
    ];
    let means = [
        dvector![0.0, 0.0],
        dvector![8.0, 5.0],
        dvector![1.0, 5.0],
        dvector![1.0, 5.0],
        dvector![8.0, 0.0],
        dvector![8.0, 0.0],
    ];
    let weights = [0.2, 0.2, 0.2, 0.2, 0.1, 0.1];
    NamedScenario {
        name: "overlapping",
        mixture: GaussianMixture::from_parts(&weights, &means, &covs)
            .expect("overlapping scenario parameters are valid"),
        notes: "6 components, 4 modes; components 3/4 and 5/6 share means and form cross shapes",
    }
}

/// Three equal-weight unit-variance isotropic components at `(0,0)`,
/// `(8,0)` and `(4,7)`: as many modes as components.
pub fn trimodal_wellseparated() -> NamedScenario {
    let w = 1.0 / 3.0;
    let weights = [1.0 - 2.0 * w, w, w];
    let means = [dvector![0.0, 0.0], dvector![8.0, 0.0], dvector![4.0, 7.0]];
    let covs = [
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
    ];
    NamedScenario {
        name: "trimodal",
        mixture: GaussianMixture::from_parts(&weights, &means, &covs)
            .expect("trimodal scenario parameters are valid"),
        notes: "3 well-separated unit-variance components, 3 modes",
    }
}

/// Standard bivariate normal.
pub fn standard_normal() -> NamedScenario {
    NamedScenario {
        name: "normal",
        mixture: GaussianMixture::single(dvector![0.0, 0.0], DMatrix::identity(2, 2))
            .expect("identity covariance"),
        notes: "single standard bivariate normal",
    }
}

pub fn scenario_by_name(name: &str) -> Result<NamedScenario> {
    match name {
        "overlapping" => Ok(overlapping_components()),
        "trimodal" => Ok(trimodal_wellseparated()),
        "normal" => Ok(standard_normal()),
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

/// Modal clustering of `data` with respect to the scenario's true mixture.
pub fn true_modal_labels(
    scenario: &NamedScenario,
    data: &DMatrix<f64>,
    config: &MeanShiftConfig,
) -> Result<Clustering> {
    Ok(clustering::modal_assign(&scenario.mixture, data, config)?.clustering)
}
