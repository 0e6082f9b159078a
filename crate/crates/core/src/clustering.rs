//! Partitions derived from a fitted mixture.
//!
//! * [`component_assign`]: each point goes to its most probable component.
//! * [`merge_components`]: component clusters whose means ascend to the same
//!   mode are united.
//! * [`modal_assign`]: each point goes to the mode its own ascent reaches.
//!
//! Cluster labels are 1-based throughout.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanshift::{find_modes, MeanShiftConfig, ModeSet};
use crate::mixture::GaussianMixture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Component,
    ModalMerge,
    ModalDirect,
    External,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Component => "component",
            Method::ModalMerge => "modal_merge",
            Method::ModalDirect => "modal_direct",
            Method::External => "external",
        }
    }
}

/// Per-point labels in `1..=k`.
///
/// Clusters defined on the whole space can be empty once restricted to a
/// finite sample; those are reported by [`empty_clusters`](Self::empty_clusters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub k: usize,
    pub method: Method,
}

impl Clustering {
    pub fn new(labels: Vec<usize>, k: usize, method: Method) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l == 0 || l > k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside 1..={k}"
            )));
        }
        Ok(Self { labels, k, method })
    }

    /// Labels taken as given; `k` is the largest label.
    pub fn external(labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().copied().max().unwrap_or(0);
        Self::new(labels, k, Method::External)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l - 1] += 1;
        }
        sizes
    }

    pub fn empty_clusters(&self) -> Vec<usize> {
        self.sizes()
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (s == 0).then_some(i + 1))
            .collect()
    }

    /// Number of clusters holding at least one point.
    pub fn occupied(&self) -> usize {
        self.sizes().iter().filter(|&&s| s > 0).count()
    }
}

fn rows(data: &DMatrix<f64>) -> Vec<DVector<f64>> {
    data.row_iter().map(|r| r.transpose()).collect()
}

fn check_data(mixture: &GaussianMixture, data: &DMatrix<f64>) -> Result<()> {
    if data.ncols() != mixture.dimension() {
        return Err(Error::DimensionMismatch {
            expected: mixture.dimension(),
            found: data.ncols(),
        });
    }
    Ok(())
}

/// Labels each point by `argmax_g π_g φ_g(x)`; ties go to the smallest index.
pub fn component_assign(mixture: &GaussianMixture, data: &DMatrix<f64>) -> Result<Clustering> {
    check_data(mixture, data)?;
    let labels = rows(data)
        .iter()
        .map(|x| {
            let terms = mixture.log_terms(x)?;
            let (best, _) =
                terms
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (g, &t)| if t > acc.1 { (g, t) } else { acc },
                    );
            Ok(best + 1)
        })
        .collect::<Result<Vec<_>>>()?;
    Clustering::new(labels, mixture.n_components(), Method::Component)
}

#[derive(Debug, Clone)]
pub struct MergeResult {
    pub clustering: Clustering,
    pub components: Clustering,
    pub modes: ModeSet,
    /// Cluster label for each component, indexed by component.
    pub merge_map: Vec<usize>,
    /// Components whose mean did not ascend to a mode; each keeps its own cluster.
    pub unresolved_components: Vec<usize>,
}

/// Unites component clusters whose means ascend to the same mode.
///
/// Mode `m` (in registration order, i.e. by first component reaching it)
/// becomes cluster `m + 1`; components with unresolved ascents get singleton
/// clusters numbered after the modes.
pub fn merge_components(
    mixture: &GaussianMixture,
    data: &DMatrix<f64>,
    config: &MeanShiftConfig,
) -> Result<MergeResult> {
    let components = component_assign(mixture, data)?;
    let search = find_modes(mixture, &mixture.means(), config)?;
    let n_modes = search.modes.len();
    let mut next = n_modes;
    let mut unresolved = Vec::new();
    let merge_map: Vec<usize> = search
        .assignment
        .iter()
        .enumerate()
        .map(|(g, a)| match a {
            Some(m) => m + 1,
            None => {
                unresolved.push(g);
                next += 1;
                next
            }
        })
        .collect();
    let labels = components
        .labels
        .iter()
        .map(|&c| merge_map[c - 1])
        .collect();
    Ok(MergeResult {
        clustering: Clustering::new(labels, next, Method::ModalMerge)?,
        components,
        modes: search.modes,
        merge_map,
        unresolved_components: unresolved,
    })
}

#[derive(Debug, Clone)]
pub struct ModalResult {
    pub clustering: Clustering,
    /// Every mode reached by some point.
    pub modes: ModeSet,
    /// Cluster label for each entry of `modes`, `None` if no point was labeled with it.
    pub mode_labels: Vec<Option<usize>>,
    /// Points whose ascent was unresolved; they are labeled by the nearest mode.
    pub unresolved_points: Vec<usize>,
}

/// Labels every point by the mode its own mean-shift ascent reaches.
///
/// Unresolved points go to the nearest registered mode in the Mahalanobis
/// metric of `Σ̄` at their terminal point.
pub fn modal_assign(
    mixture: &GaussianMixture,
    data: &DMatrix<f64>,
    config: &MeanShiftConfig,
) -> Result<ModalResult> {
    check_data(mixture, data)?;
    let starts = rows(data);
    let search = find_modes(mixture, &starts, config)?;
    if search.modes.is_empty() {
        return Err(Error::UnresolvedTrajectory);
    }
    let unresolved = search.unresolved();
    let mut mode_of = Vec::with_capacity(starts.len());
    for (i, a) in search.assignment.iter().enumerate() {
        let m = match a {
            Some(m) => *m,
            None => nearest_mode(mixture, &search.modes, &search.terminals[i])?,
        };
        mode_of.push(m);
    }
    // compact to modes that actually label a point, in registration order
    let mut used = vec![false; search.modes.len()];
    for &m in &mode_of {
        used[m] = true;
    }
    let mut mode_labels = vec![None; search.modes.len()];
    let mut k = 0;
    for (m, u) in used.iter().enumerate() {
        if *u {
            k += 1;
            mode_labels[m] = Some(k);
        }
    }
    let labels = mode_of
        .iter()
        .map(|&m| mode_labels[m].expect("used mode has a label"))
        .collect();
    Ok(ModalResult {
        clustering: Clustering::new(labels, k, Method::ModalDirect)?,
        modes: search.modes,
        mode_labels,
        unresolved_points: unresolved,
    })
}

fn nearest_mode(mixture: &GaussianMixture, modes: &ModeSet, at: &DVector<f64>) -> Result<usize> {
    let sigma_bar = mixture.harmonic_mean_covariance(at)?;
    let factor = crate::gaussian::factorize(&sigma_bar)?;
    let mut best = (0, f64::INFINITY);
    for (m, mode) in modes.modes.iter().enumerate() {
        let mut diff: Vec<f64> = (mode - at).iter().copied().collect();
        let dist = factor.mahalanobis_sq_in_place(&mut diff);
        if dist < best.1 {
            best = (m, dist);
        }
    }
    Ok(best.0)
}

fn comb2(n: u64) -> i128 {
    let n = n as i128;
    n * (n - 1) / 2
}

/// Adjusted Rand index of two label vectors over the same points.
///
/// Pair counts are kept as integers and combined into a single division,
/// so simple cases come out exact. When both partitions are trivial in the
/// same way (all one cluster, or all singletons) the index is 0/0; it is
/// reported as 1.
pub fn adjusted_rand_index_labels(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: i128 = table.values().map(|&c| comb2(c)).sum();
    let sum_a: i128 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: i128 = cols.values().map(|&c| comb2(c)).sum();
    let total = comb2(a.len() as u64);
    // (index − E)/(max − E) with E = sum_a·sum_b/total, max = (sum_a + sum_b)/2,
    // scaled through by 2·total
    let num = 2 * (total * index - sum_a * sum_b);
    let den = total * (sum_a + sum_b) - 2 * sum_a * sum_b;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

pub fn adjusted_rand_index(a: &Clustering, b: &Clustering) -> Result<f64> {
    adjusted_rand_index_labels(&a.labels, &b.labels)
}

/// Counts labels of `fine` whose points are split across several labels of
/// `coarse`. Zero means `coarse` is a coarsening of `fine`.
pub fn refinement_violations(fine: &[usize], coarse: &[usize]) -> Result<usize> {
    if fine.len() != coarse.len() {
        return Err(Error::LengthMismatch(fine.len(), coarse.len()));
    }
    let mut seen: HashMap<usize, usize> = HashMap::new();
    let mut bad = std::collections::BTreeSet::new();
    for (&f, &c) in fine.iter().zip(coarse) {
        match seen.get(&f) {
            Some(&prev) if prev != c => {
                bad.insert(f);
            }
            Some(_) => {}
            None => {
                seen.insert(f, c);
            }
        }
    }
    Ok(bad.len())
}
