//! Synthetic instances of the misaligned-task regime and numerical checks
//! of the distributed-encoding claims.
//!
//! An [`AssumptionInstance`] realizes the three structural assumptions
//! directly: a base matrix with polynomially decaying spectrum and Haar
//! singular vectors, a low-dimensional task subspace nearly orthogonal to
//! the top-k right singular vectors, and a low-rank task gradient whose
//! row space lies in that subspace, plus an optional bounded noise term.
//!
//! On top of the generator sit the checks: the one-step scaling analysis
//! ([`verify_theorem`]), first-order singular-value perturbation
//! ([`perturbation_check`]), the cost of top-k-only protection
//! ([`topk_protection_cost`]), multi-skill unions, and the rank
//! correlation between learned deviations and gradient importance
//! ([`svf_probe_faithfulness`]).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapters::SvfAdapter;
use crate::error::{Error, Result};
use crate::matrix::{orthonormalize_columns, DenseMatrix, RealVector};
use crate::probe::{gamma_spectrum, skill_relevant_set, theory_epsilon, SkillRelevantSet};
use crate::seeding::stream;
use crate::svd::{svd, SvdFactors};

/// Smallest admissible relative gap between consecutive singular values
/// of a generated base; per-index perturbation comparisons need simple
/// singular values.
const MIN_RELATIVE_GAP: f64 = 1e-3;

/// Threshold floor so the skill-relevant set stays well-defined above
/// roundoff when the misalignment is exactly zero.
const EPSILON_FLOOR: f64 = 1e-12;

/// Parameters of a synthetic instance.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TheoryParams {
    pub m: usize,
    pub n: usize,
    pub s: usize,
    pub k: usize,
    pub delta: f64,
    pub decay_alpha: f64,
    pub eps_noise: f64,
    /// Frobenius norm the structured gradient is rescaled to. Keeps the
    /// off-principal signal above the threshold scale while one-step
    /// perturbation stays first-order.
    pub gradient_norm: f64,
}

impl Default for TheoryParams {
    fn default() -> Self {
        Self {
            m: 64,
            n: 64,
            s: 2,
            k: 8,
            delta: 1e-4,
            decay_alpha: 1.0,
            eps_noise: 0.0,
            gradient_norm: 1.5,
        }
    }
}

impl TheoryParams {
    pub fn canonical() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.m.min(self.n);
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if self.k == 0 || self.k >= r {
            return Err(Error::InvalidArgument(format!(
                "k = {} out of range 1..{r}",
                self.k
            )));
        }
        if self.s == 0 || self.s > self.n - self.k {
            return Err(Error::InvalidArgument(format!(
                "s = {} infeasible: need 1 <= s <= n - k = {}",
                self.s,
                self.n - self.k
            )));
        }
        if self.delta < 0.0 || self.delta >= 1.0 {
            return Err(Error::InvalidArgument(format!("delta = {} out of [0, 1)", self.delta)));
        }
        if self.eps_noise < 0.0 {
            return Err(Error::InvalidArgument("eps_noise must be nonnegative".into()));
        }
        if self.gradient_norm < 0.0 {
            return Err(Error::InvalidArgument("gradient_norm must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A concrete realization of the structural assumptions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionInstance {
    pub w0: SvdFactors,
    /// Orthonormal basis of the task subspace, n x s.
    pub v_task: DenseMatrix,
    /// Rank factors of the structured gradient term.
    pub g_factors: Vec<(RealVector, RealVector)>,
    pub noise: DenseMatrix,
    pub k: usize,
    /// Achieved misalignment `max_{i<k} |P_task v_i|^2`.
    pub delta: f64,
    pub decay_alpha: f64,
    pub eps_noise: f64,
    pub seed: u64,
}

impl AssumptionInstance {
    pub fn m(&self) -> usize {
        self.w0.out_dim()
    }

    pub fn n(&self) -> usize {
        self.w0.in_dim()
    }

    pub fn s(&self) -> usize {
        self.g_factors.len()
    }

    /// Materialize the structured gradient `sum_j g_j h_j'`.
    pub fn task_gradient(&self) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(self.m(), self.n());
        for (gj, hj) in &self.g_factors {
            for i in 0..self.m() {
                let gi = gj[i];
                if gi == 0.0 {
                    continue;
                }
                for j in 0..self.n() {
                    g[(i, j)] += gi * hj[j];
                }
            }
        }
        g
    }

    /// Structured gradient plus the noise term.
    pub fn full_gradient(&self) -> DenseMatrix {
        self.task_gradient()
            .add(&self.noise)
            .expect("noise shape matches")
    }

    /// Recompute `max_{i<k} |V_task' v_i|^2` from the raw factors.
    pub fn achieved_misalignment(&self) -> f64 {
        self.task_projector_norms().into_iter().fold(0.0, f64::max)
    }

    /// `|P_task v_i|^2` for each of the top-k right singular vectors.
    pub fn task_projector_norms(&self) -> Vec<f64> {
        (0..self.k)
            .map(|i| {
                let vi = self.w0.right_vector(i);
                let mut sq = 0.0;
                for j in 0..self.v_task.cols() {
                    let c = self.v_task.column(j).dot(&vi).expect("dims match");
                    sq += c * c;
                }
                sq
            })
            .collect()
    }
}

/// Base matrix with spectrum `sigma_i = (i + 1)^(-alpha/2)` and Haar
/// singular vectors, under the global sign convention.
pub fn generate_base(m: usize, n: usize, decay_alpha: f64, seed: u64) -> Result<SvdFactors> {
    let r = m.min(n);
    let mut rng = stream(seed, "theory/base");
    let u = orthonormalize_columns(&DenseMatrix::gaussian(m, r, &mut rng))?;
    let v = orthonormalize_columns(&DenseMatrix::gaussian(n, r, &mut rng))?;

    let mut sigma = vec![0.0; r];
    for (i, s) in sigma.iter_mut().enumerate() {
        *s = ((i + 1) as f64).powf(-decay_alpha / 2.0);
    }
    for i in 1..r {
        sigma[i] = sigma[i].min(sigma[i - 1] * (1.0 - MIN_RELATIVE_GAP));
    }

    let (mut u, mut vt) = (u, v.transpose());
    // Same orientation rule as the factorizer, so persisted vectors from
    // either source compare directly.
    for i in 0..r {
        let mut best_row = 0;
        let mut best_abs = -1.0;
        for p in 0..m {
            if u[(p, i)].abs() > best_abs {
                best_abs = u[(p, i)].abs();
                best_row = p;
            }
        }
        if u[(best_row, i)] < 0.0 {
            for p in 0..m {
                u[(p, i)] = -u[(p, i)];
            }
            for q in 0..n {
                vt[(i, q)] = -vt[(i, q)];
            }
        }
    }
    SvdFactors::from_parts(u, RealVector::new(sigma)?, vt)
}

/// An orthonormal `n x s` task basis built inside the span of the
/// non-principal right singular vectors, with controlled leakage of at
/// most `delta_target` (squared norm) into the top-k span.
///
/// Returns the basis and the achieved `max_{i<k} |P_task v_i|^2`.
pub fn misaligned_task_basis(
    base: &SvdFactors,
    k: usize,
    s: usize,
    delta_target: f64,
    rng: &mut impl rand::Rng,
) -> Result<(DenseMatrix, f64)> {
    let n = base.in_dim();
    if k >= base.rank() || s == 0 || s > n - k {
        return Err(Error::InvalidArgument(format!(
            "infeasible task basis: n = {n}, k = {k}, s = {s}"
        )));
    }
    let v_top = DenseMatrix::from_fn(n, k, |i, j| base.vt()[(j, i)]);

    // Start from Gaussian columns with the top-k components removed.
    let raw = DenseMatrix::gaussian(n, s, rng);
    let coords = v_top.transpose().matmul(&raw)?;
    let skew = raw.sub(&v_top.matmul(&coords)?)?;
    let perp = orthonormalize_columns(&skew)?;

    if delta_target <= 0.0 {
        let achieved = achieved_misalignment_of(&perp, base, k);
        return Ok((perp, achieved));
    }

    // Mix in an orthonormal leakage frame living inside the top-k span;
    // the mixed columns stay exactly orthonormal.
    let s_leak = s.min(k);
    let leak_coords = DenseMatrix::gaussian(k, s_leak, rng);
    let leak = orthonormalize_columns(&v_top.matmul(&leak_coords)?)?;

    let keep = (1.0 - delta_target).sqrt();
    let inject = delta_target.sqrt();
    let mut basis = perp;
    for j in 0..s_leak {
        let mixed = basis.column(j).scale(keep).add(&leak.column(j).scale(inject))?;
        basis.set_column(j, &mixed);
    }
    let achieved = achieved_misalignment_of(&basis, base, k);
    if achieved > delta_target + 1e-12 {
        return Err(Error::InvariantViolation(format!(
            "misalignment {achieved:.3e} exceeds target {delta_target:.3e}"
        )));
    }
    Ok((basis, achieved))
}

fn achieved_misalignment_of(basis: &DenseMatrix, base: &SvdFactors, k: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..k {
        let vi = base.right_vector(i);
        let mut sq = 0.0;
        for j in 0..basis.cols() {
            let c = basis.column(j).dot(&vi).expect("dims match");
            sq += c * c;
        }
        worst = worst.max(sq);
    }
    worst
}

/// Generate a full instance from scratch.
pub fn generate_instance(params: &TheoryParams, seed: u64) -> Result<AssumptionInstance> {
    params.validate()?;
    let w0 = generate_base(params.m, params.n, params.decay_alpha, seed)?;
    generate_instance_on(w0, params, seed)
}

/// Generate the task-dependent parts of an instance on a shared base.
pub fn generate_instance_on(
    w0: SvdFactors,
    params: &TheoryParams,
    seed: u64,
) -> Result<AssumptionInstance> {
    params.validate()?;
    if w0.out_dim() != params.m || w0.in_dim() != params.n {
        return Err(Error::shape(
            "generate_instance_on",
            format!("{}x{}", params.m, params.n),
            format!("{}x{}", w0.out_dim(), w0.in_dim()),
        ));
    }
    let mut task_rng = stream(seed, "theory/task");
    let (v_task, achieved) =
        misaligned_task_basis(&w0, params.k, params.s, params.delta, &mut task_rng)?;

    let mut grad_rng = stream(seed, "theory/gradient");
    let mut g_factors: Vec<(RealVector, RealVector)> = Vec::with_capacity(params.s);
    for _ in 0..params.s {
        let g = RealVector::gaussian(params.m, &mut grad_rng);
        let c = RealVector::gaussian(params.s, &mut grad_rng);
        let h = v_task.matvec(&c)?.normalized()?;
        g_factors.push((g, h));
    }

    let mut instance = AssumptionInstance {
        w0,
        v_task,
        g_factors,
        noise: DenseMatrix::zeros(params.m, params.n),
        k: params.k,
        delta: achieved,
        decay_alpha: params.decay_alpha,
        eps_noise: params.eps_noise,
        seed,
    };

    // Rescale the g-side so the structured gradient has the prescribed
    // Frobenius norm.
    let current = instance.task_gradient().frobenius_norm();
    if current > 0.0 && params.gradient_norm > 0.0 {
        let scale = params.gradient_norm / current;
        for (g, _) in instance.g_factors.iter_mut() {
            *g = g.scale(scale);
        }
    }

    if params.eps_noise > 0.0 {
        let mut noise_rng = stream(seed, "theory/noise");
        let raw = DenseMatrix::gaussian(params.m, params.n, &mut noise_rng);
        instance.noise = raw.scale(params.eps_noise / raw.frobenius_norm());
    }
    Ok(instance)
}

/// Per-component row of a verdict table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerdictRow {
    pub index: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub z_dev: f64,
}

/// Outcome of the one-step scaling analysis on one instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoremVerdict {
    pub seed: u64,
    /// `max_{i<k} |gamma_i|`.
    pub gamma_max_topk: f64,
    /// Largest loading beyond the prefix and where it sits.
    pub gamma_star: f64,
    pub i_star: usize,
    /// Cauchy-Schwarz ceiling for the prefix loadings.
    pub bound_small: f64,
    /// Existence-scale for the off-prefix loading.
    pub bound_large: f64,
    pub c_t: f64,
    /// Realized `gamma_max_topk / sqrt(delta)`; zero when delta is zero.
    pub empirical_c1: f64,
    pub epsilon: f64,
    pub s_set: SkillRelevantSet,
    pub contained_in_topk: bool,
    pub small_bound_holds: bool,
    pub large_bound_attained: bool,
    pub degenerate: bool,
    pub details: Vec<VerdictRow>,
}

/// One analytic scaling step from the identity initialization:
/// `z_i - 1 = -eta_z sigma_i gamma_i`, thresholded at
/// `epsilon = eta_z sigma_max sqrt(delta)`.
pub fn verify_theorem(inst: &AssumptionInstance, eta_z: f64) -> Result<TheoremVerdict> {
    let gradient = inst.full_gradient();
    let gamma = gamma_spectrum(&gradient, &inst.w0)?.gamma;
    let sigma = inst.w0.sigma();
    let r = inst.w0.rank();
    let k = inst.k;

    let z: Vec<f64> = (0..r).map(|i| 1.0 - eta_z * sigma[i] * gamma[i]).collect();
    let svf = SvfAdapter::new(RealVector::new(z)?);
    let epsilon = theory_epsilon(eta_z, inst.w0.sigma_max(), inst.delta).max(EPSILON_FLOOR);
    let s_set = skill_relevant_set(&svf, epsilon)?;

    let gamma_max_topk = (0..k).map(|i| gamma[i].abs()).fold(0.0, f64::max);
    let (mut i_star, mut gamma_star) = (k, 0.0f64);
    for i in k..r {
        if gamma[i].abs() > gamma_star {
            gamma_star = gamma[i].abs();
            i_star = i;
        }
    }

    let g_norm = inst.task_gradient().frobenius_norm();
    let degenerate = g_norm == 0.0;
    let c_t = if inst.s() > 0 {
        g_norm / (inst.s() as f64).sqrt()
    } else {
        0.0
    };
    let bound_large = c_t / ((inst.n() - k) as f64).sqrt();
    let c1: f64 = inst.g_factors.iter().map(|(g, h)| g.norm() * h.norm()).sum();
    let bound_small = c1 * inst.delta.sqrt();
    let empirical_c1 = if inst.delta > 0.0 {
        gamma_max_topk / inst.delta.sqrt()
    } else {
        0.0
    };

    let details: Vec<VerdictRow> = (0..r)
        .map(|i| VerdictRow {
            index: i,
            sigma: sigma[i],
            gamma: gamma[i],
            z_dev: (svf.z[i] - 1.0).abs(),
        })
        .collect();

    let contained_in_topk = s_set.contained_in_prefix(k);
    Ok(TheoremVerdict {
        seed: inst.seed,
        gamma_max_topk,
        gamma_star,
        i_star,
        bound_small,
        bound_large,
        c_t,
        empirical_c1,
        epsilon,
        contained_in_topk,
        small_bound_holds: gamma_max_topk <= bound_small + 1e-12,
        large_bound_attained: gamma_star >= bound_large,
        degenerate,
        s_set,
        details,
    })
}

/// Run the one-step analysis over `seed_count` fresh instances.
pub fn theorem_sweep(
    params: &TheoryParams,
    eta_z: f64,
    seed_count: u64,
) -> Result<Vec<TheoremVerdict>> {
    (0..seed_count)
        .map(|seed| verify_theorem(&generate_instance(params, seed)?, eta_z))
        .collect()
}

/// Per-index comparison of the observed singular value shift against the
/// first-order prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub index: usize,
    pub sigma_before: f64,
    pub sigma_after: f64,
    pub observed_rel_change: f64,
    pub predicted_rel_change: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub eta: f64,
    pub rows: Vec<PerturbationRow>,
    pub max_residual: f64,
}

/// Take one gradient step on the materialized weights, refactor, and
/// compare each singular value shift `|d sigma_i|` against its
/// first-order prediction `eta |gamma_i``, alongside the corresponding
/// relative changes. The headline residual is the absolute shift
/// disagreement, which vanishes quadratically in `eta` for noise-free
/// instances.
pub fn perturbation_check(inst: &AssumptionInstance, eta: f64) -> Result<PerturbationReport> {
    let gradient = inst.full_gradient();
    let gamma = gamma_spectrum(&gradient, &inst.w0)?.gamma;
    let w0 = inst.w0.reconstruct();
    let w1 = w0.sub(&gradient.scale(eta))?;
    let after = svd(&w1)?;

    let mut rows = Vec::with_capacity(inst.w0.rank());
    let mut max_residual = 0.0f64;
    for i in 0..inst.w0.rank() {
        let before = inst.w0.sigma()[i];
        let now = after.sigma()[i];
        let shift = (now - before).abs();
        let predicted_shift = eta * gamma[i].abs();
        let residual = (shift - predicted_shift).abs();
        max_residual = max_residual.max(residual);
        rows.push(PerturbationRow {
            index: i,
            sigma_before: before,
            sigma_after: now,
            observed_rel_change: shift / before,
            predicted_rel_change: predicted_shift / before,
            residual,
        });
    }
    Ok(PerturbationReport {
        eta,
        rows,
        max_residual,
    })
}

/// Residual at `eta` and `eta / 2` plus their ratio, which sits near 4
/// when the residual is dominated by the second-order term.
pub fn perturbation_decay(
    inst: &AssumptionInstance,
    eta: f64,
) -> Result<(PerturbationReport, PerturbationReport, f64)> {
    let full = perturbation_check(inst, eta)?;
    let half = perturbation_check(inst, eta / 2.0)?;
    let ratio = if half.max_residual > 0.0 {
        full.max_residual / half.max_residual
    } else {
        f64::INFINITY
    };
    Ok((full, half, ratio))
}

/// First-order loss-decrease mass forfeited by restricting scaling
/// updates to the top-k prefix, together with the corollary's comparison
/// floor. Both sides are reported; no inequality is asserted.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtectionCost {
    pub forfeited: f64,
    pub floor: f64,
}

pub fn topk_protection_cost(inst: &AssumptionInstance) -> Result<ProtectionCost> {
    let gradient = inst.full_gradient();
    let gamma = gamma_spectrum(&gradient, &inst.w0)?.gamma;
    let sigma = inst.w0.sigma();
    let forfeited: f64 = (inst.k..inst.w0.rank())
        .map(|i| {
            let t = sigma[i] * gamma[i];
            t * t
        })
        .sum();
    let g_norm = inst.task_gradient().frobenius_norm();
    let c_t = if inst.s() > 0 {
        g_norm / (inst.s() as f64).sqrt()
    } else {
        0.0
    };
    Ok(ProtectionCost {
        forfeited,
        floor: c_t * c_t / (inst.n() - inst.k) as f64,
    })
}

/// Union of skill-relevant sets across instances sharing one base.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnionReport {
    pub union: BTreeSet<usize>,
    pub per_skill_sizes: Vec<usize>,
    /// How many skills flagged each component index.
    pub coverage: Vec<usize>,
    /// Length of the shortest spectrum prefix containing the union.
    pub min_covering_prefix: usize,
    pub contained_in_topk: bool,
}

pub fn multiskill_union(instances: &[AssumptionInstance], eta_z: f64) -> Result<UnionReport> {
    if instances.is_empty() {
        return Ok(UnionReport {
            union: BTreeSet::new(),
            per_skill_sizes: Vec::new(),
            coverage: Vec::new(),
            min_covering_prefix: 0,
            contained_in_topk: true,
        });
    }
    let w0 = &instances[0].w0;
    for inst in &instances[1..] {
        if inst.w0 != *w0 {
            return Err(Error::InvalidArgument(
                "multiskill_union requires all instances to share the same base".into(),
            ));
        }
    }
    let mut union = BTreeSet::new();
    let mut per_skill_sizes = Vec::with_capacity(instances.len());
    let mut coverage = vec![0usize; w0.rank()];
    for inst in instances {
        let verdict = verify_theorem(inst, eta_z)?;
        per_skill_sizes.push(verdict.s_set.len());
        for &i in &verdict.s_set.indices {
            coverage[i] += 1;
            union.insert(i);
        }
    }
    let min_covering_prefix = union.iter().next_back().map_or(0, |&max| max + 1);
    let k = instances[0].k;
    Ok(UnionReport {
        contained_in_topk: union.iter().all(|&i| i < k),
        union,
        per_skill_sizes,
        coverage,
        min_covering_prefix,
    })
}

/// How faithfully learned deviations track `sigma_i |gamma_i|`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    /// Max deviation of `|z_i - 1| / (sigma_i |gamma_i|)` from `eta_z`
    /// over components with nonzero loading, for the analytic step.
    pub analytic_ratio_max_dev: f64,
    /// Spearman rank correlation between multi-step deviations and
    /// `sigma_i |gamma_i|`.
    pub spearman: f64,
    pub final_devs: Vec<f64>,
    pub importance: Vec<f64>,
}

/// Analytic proportionality check plus a multi-step descent on a
/// quadratic surrogate whose target is one gradient step away.
pub fn svf_probe_faithfulness(
    inst: &AssumptionInstance,
    eta_z: f64,
    descent_steps: usize,
    descent_lr: f64,
) -> Result<FaithfulnessReport> {
    let gradient = inst.full_gradient();
    let gamma = gamma_spectrum(&gradient, &inst.w0)?.gamma;
    let sigma = inst.w0.sigma();
    let r = inst.w0.rank();

    let importance: Vec<f64> = (0..r).map(|i| sigma[i] * gamma[i].abs()).collect();

    let mut analytic_ratio_max_dev = 0.0f64;
    for i in 0..r {
        if gamma[i] != 0.0 {
            let dev = eta_z * sigma[i] * gamma[i].abs();
            analytic_ratio_max_dev =
                analytic_ratio_max_dev.max((dev / importance[i] - eta_z).abs());
        }
    }

    // Quadratic surrogate: L(z) = 1/2 |W_z - (W0 - G)|_F^2. In the dyad
    // basis the descent decouples per component:
    //   d_i <- d_i - lr sigma_i (sigma_i d_i + gamma_i),  d_i = z_i - 1.
    let mut devs = vec![0.0f64; r];
    for _ in 0..descent_steps {
        for i in 0..r {
            devs[i] -= descent_lr * sigma[i] * (sigma[i] * devs[i] + gamma[i]);
        }
    }
    let final_devs: Vec<f64> = devs.iter().map(|d| d.abs()).collect();
    let spearman = spearman(&final_devs, &importance);

    Ok(FaithfulnessReport {
        analytic_ratio_max_dev,
        spearman,
        final_devs,
        importance,
    })
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    pearson(&ranks(a), &ranks(b))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut out = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos;
        while end + 1 < n && values[order[end + 1]] == values[order[pos]] {
            end += 1;
        }
        let avg = (pos + end) as f64 / 2.0 + 1.0;
        for &idx in &order[pos..=end] {
            out[idx] = avg;
        }
        pos = end + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_on_monotone_data() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&a, &b) - 1.0).abs() <= 1e-12);
        let c = [40.0, 30.0, 20.0, 10.0];
        assert!((spearman(&a, &c) + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        let r = ranks(&[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn params_validation() {
        let mut p = TheoryParams::canonical();
        assert!(p.validate().is_ok());
        p.s = 57; // n - k = 56
        assert!(p.validate().is_err());
        p = TheoryParams::canonical();
        p.k = 64;
        assert!(p.validate().is_err());
    }

    #[test]
    fn generated_base_has_prescribed_decay() {
        let base = generate_base(16, 12, 1.0, 3).unwrap();
        let s = base.sigma().as_slice();
        for (i, &v) in s.iter().enumerate() {
            let want = ((i + 1) as f64).powf(-0.5);
            assert!((v - want).abs() <= 1e-12);
        }
    }
}
