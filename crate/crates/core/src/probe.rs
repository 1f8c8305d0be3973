//! Reading skill relevance out of the singular spectrum.
//!
//! The frozen scaling vector learned in phase 1 acts as a geometric probe:
//! components whose scaling deviates most from 1 are the ones the skill
//! engaged. This module selects those components, stores their singular
//! vectors for protection, computes per-component gradient loadings, and
//! provides the overlap diagnostics used to compare selection strategies.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapters::SvfAdapter;
use crate::error::{Error, Result};
use crate::matrix::{orthonormality_defect, DenseMatrix, RealVector};
use crate::svd::SvdFactors;

/// The protected subspace of one layer: selected component indices and
/// the corresponding singular vectors of the frozen base.
///
/// `u_crit` columns are the protected output directions. `v_crit` holds
/// the paired input directions; they are stored for diagnostics and for
/// the optional right-side variant but are never penalized.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalSubspace {
    pub indices: Vec<usize>,
    pub u_crit: DenseMatrix,
    pub v_crit: DenseMatrix,
    pub source_layer: String,
}

impl CriticalSubspace {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Recheck the structural invariants against the source factors.
    pub fn validate_against(&self, base: &SvdFactors) -> Result<()> {
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvariantViolation(
                "critical indices are not strictly increasing".into(),
            ));
        }
        if let Some(&last) = self.indices.last() {
            if last >= base.rank() {
                return Err(Error::InvariantViolation(format!(
                    "critical index {last} exceeds rank {}",
                    base.rank()
                )));
            }
        }
        let defect = orthonormality_defect(&self.u_crit);
        if defect > 1e-10 {
            return Err(Error::NotOrthonormal {
                what: "protected singular vectors",
                deviation: defect,
            });
        }
        for (j, &idx) in self.indices.iter().enumerate() {
            let diff = self
                .u_crit
                .column(j)
                .sub(&base.left_vector(idx))?
                .norm();
            if diff > 1e-12 {
                return Err(Error::InvariantViolation(format!(
                    "protected column {j} differs from source vector {idx} by {diff:.3e}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-component loadings of a gradient on the singular dyads of a base.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GammaSpectrum {
    pub gamma: RealVector,
    pub source: String,
}

/// Components whose trained scaling deviates from 1 by more than the
/// stored threshold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkillRelevantSet {
    pub indices: BTreeSet<usize>,
    pub epsilon: f64,
}

impl SkillRelevantSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// True when every member lies below `k` (the empty set qualifies).
    pub fn contained_in_prefix(&self, k: usize) -> bool {
        self.indices.iter().all(|&i| i < k)
    }
}

/// Indices of the `k` largest deviations `|z_i - 1|`, ties broken by the
/// lower index, returned sorted ascending.
pub fn critical_indices(svf: &SvfAdapter, k: usize) -> Result<Vec<usize>> {
    let n = svf.rank();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range 1..={n}"
        )));
    }
    let dev = svf.deviations();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort by descending deviation keeps the lowest index first
    // among ties.
    order.sort_by(|&a, &b| dev[b].partial_cmp(&dev[a]).unwrap());
    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Gather the singular vectors of a base at explicit component indices.
pub fn subspace_from_indices(
    base: &SvdFactors,
    indices: &[usize],
    source_layer: impl Into<String>,
) -> Result<CriticalSubspace> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty index set".into()));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "indices must be strictly increasing".into(),
        ));
    }
    if *indices.last().unwrap() >= base.rank() {
        return Err(Error::InvalidArgument(format!(
            "index {} exceeds rank {}",
            indices.last().unwrap(),
            base.rank()
        )));
    }
    let u_cols: Vec<RealVector> = indices.iter().map(|&i| base.left_vector(i)).collect();
    let v_cols: Vec<RealVector> = indices.iter().map(|&i| base.right_vector(i)).collect();
    Ok(CriticalSubspace {
        indices: indices.to_vec(),
        u_crit: DenseMatrix::from_columns(&u_cols)?,
        v_crit: DenseMatrix::from_columns(&v_cols)?,
        source_layer: source_layer.into(),
    })
}

/// Gather the singular vectors at the critical indices of a layer.
pub fn build_critical_subspace(
    base: &SvdFactors,
    svf: &SvfAdapter,
    k: usize,
    source_layer: impl Into<String>,
) -> Result<CriticalSubspace> {
    if svf.rank() != base.rank() {
        return Err(Error::shape(
            "build_critical_subspace",
            format!("{}", base.rank()),
            format!("{}", svf.rank()),
        ));
    }
    let indices = critical_indices(svf, k)?;
    subspace_from_indices(base, &indices, source_layer)
}

/// Spectral loading coefficients `gamma_i = u_i' grad v_i`.
pub fn gamma_spectrum(grad: &DenseMatrix, base: &SvdFactors) -> Result<GammaSpectrum> {
    if grad.rows() != base.out_dim() || grad.cols() != base.in_dim() {
        return Err(Error::shape(
            "gamma_spectrum",
            format!("{}x{}", base.out_dim(), base.in_dim()),
            format!("{}x{}", grad.rows(), grad.cols()),
        ));
    }
    // grad * v_i for all i at once, then one dot per component.
    let gv = grad.matmul(&base.vt().transpose())?;
    let gamma: Vec<f64> = (0..base.rank())
        .map(|i| {
            (0..grad.rows())
                .map(|p| base.u()[(p, i)] * gv[(p, i)])
                .sum()
        })
        .collect();
    Ok(GammaSpectrum {
        gamma: RealVector::new(gamma)?,
        source: String::new(),
    })
}

/// Exact gradient of a loss with respect to the scaling vector when
/// `grad_w` is the loss gradient at the scaled weight: entry `i` is
/// `sigma_i * gamma_i`.
pub fn svf_loss_gradient(grad_w: &DenseMatrix, base: &SvdFactors) -> Result<RealVector> {
    let gamma = gamma_spectrum(grad_w, base)?;
    Ok(RealVector::new(
        base.sigma()
            .iter()
            .zip(gamma.gamma.iter())
            .map(|(s, g)| s * g)
            .collect(),
    )?)
}

/// Exactly the indices with `|z_i - 1| > epsilon`.
pub fn skill_relevant_set(svf: &SvfAdapter, epsilon: f64) -> Result<SkillRelevantSet> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let indices = svf
        .deviations()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > epsilon)
        .map(|(i, _)| i)
        .collect();
    Ok(SkillRelevantSet { indices, epsilon })
}

/// Data-driven threshold for trained probes: the median deviation.
pub fn empirical_epsilon(svf: &SvfAdapter) -> f64 {
    let mut dev = svf.deviations();
    if dev.is_empty() {
        return 0.0;
    }
    dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = dev.len();
    if n % 2 == 1 {
        dev[n / 2]
    } else {
        0.5 * (dev[n / 2 - 1] + dev[n / 2])
    }
}

/// Theory-side threshold `eta_z * sigma_max * sqrt(delta)`.
pub fn theory_epsilon(eta_z: f64, sigma_max: f64, delta: f64) -> f64 {
    eta_z * sigma_max * delta.max(0.0).sqrt()
}

/// Overlap fraction `|a & b| / min(|a|, |b|)` and Jaccard index
/// `|a & b| / |a | b|` for a single pair of index sets. Degenerate
/// denominators yield zero.
pub fn index_set_overlap(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> (f64, f64) {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    let min = a.len().min(b.len());
    let overlap = if min == 0 { 0.0 } else { inter as f64 / min as f64 };
    let jaccard = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    (overlap, jaccard)
}

/// Micro-averaged overlap across layers: intersection, min-cardinality
/// and union counts are pooled before dividing.
pub fn pooled_overlap(pairs: &[(BTreeSet<usize>, BTreeSet<usize>)]) -> (f64, f64) {
    let mut inter = 0usize;
    let mut min_sum = 0usize;
    let mut union = 0usize;
    for (a, b) in pairs {
        inter += a.intersection(b).count();
        min_sum += a.len().min(b.len());
        union += a.union(b).count();
    }
    let overlap = if min_sum == 0 { 0.0 } else { inter as f64 / min_sum as f64 };
    let jaccard = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    (overlap, jaccard)
}
