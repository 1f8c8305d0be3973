//! Two-phase adaptation on a toy multilayer model.
//!
//! Phase 1 trains the per-layer scaling vectors on a synthetic skill by
//! plain gradient descent and freezes them together with the critical
//! subspaces they identify. Phase 2 injects a batch of synthetic facts
//! through the low-rank adapters while penalizing (or hard-projecting
//! away) their action on a protected subspace, selectable among the
//! probe-guided, raw top-k, random-k, orthogonal-complement, and
//! unconstrained baselines.
//!
//! The model is a small tanh network (2 to 4 layers). Everything is
//! full-precision, deterministic, and driven by labeled seed streams.

use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{lora_delta, AdaptedLayer, LoraAdapter, SvfAdapter};
use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, RealVector};
use crate::probe::{build_critical_subspace, subspace_from_indices, svf_loss_gradient, CriticalSubspace};
use crate::seeding::{derive_seed, stream};
use crate::svd::SvdFactors;
use crate::theory::{generate_base, misaligned_task_basis};

/// Which subspace shields the skill during knowledge injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtectionMode {
    /// Phase-1 probe subspaces, penalized with the configured weight.
    SvfGuided,
    /// The k largest singular components in raw spectral order.
    TopkRaw,
    /// A seeded uniform k-subset of components.
    RandomK,
    /// Hard projection of the update off the raw top-k output span
    /// after every step; no penalty term.
    OrthComplement,
    /// Plain low-rank training; the penalty weight is forced to zero and
    /// interference is still measured against the probe subspaces.
    None,
}

impl ProtectionMode {
    pub const ALL: [ProtectionMode; 5] = [
        ProtectionMode::SvfGuided,
        ProtectionMode::TopkRaw,
        ProtectionMode::RandomK,
        ProtectionMode::OrthComplement,
        ProtectionMode::None,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ProtectionMode::SvfGuided => "svf_guided",
            ProtectionMode::TopkRaw => "topk_raw",
            ProtectionMode::RandomK => "random_k",
            ProtectionMode::OrthComplement => "orth_complement",
            ProtectionMode::None => "none",
        }
    }
}

impl std::fmt::Display for ProtectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svf_guided" => Ok(ProtectionMode::SvfGuided),
            "topk_raw" => Ok(ProtectionMode::TopkRaw),
            "random_k" => Ok(ProtectionMode::RandomK),
            "orth_complement" => Ok(ProtectionMode::OrthComplement),
            "none" => Ok(ProtectionMode::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown protection mode '{other}' (expected svf_guided, topk_raw, random_k, orth_complement, or none)"
            ))),
        }
    }
}

/// Knowledge-injection hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lora_rank: usize,
    pub alpha: f64,
    pub lambda_ortho: f64,
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub protection_mode: ProtectionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lora_rank: 4,
            alpha: 32.0,
            lambda_ortho: 10.0,
            k: 8,
            lr: 2e-3,
            epochs: 300,
            batch_size: 10,
            seed: 0,
            protection_mode: ProtectionMode::SvfGuided,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        let min_rank = model
            .layers()
            .iter()
            .map(|l| l.base_svd().rank())
            .min()
            .unwrap_or(0);
        if self.k == 0 || self.k > min_rank {
            return Err(Error::InvalidArgument(format!(
                "k = {} out of range 1..={min_rank}",
                self.k
            )));
        }
        if self.lora_rank == 0 {
            return Err(Error::InvalidArgument("lora_rank must be positive".into()));
        }
        for (l, layer) in model.layers().iter().enumerate() {
            if layer.lora().rank != self.lora_rank {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} adapter has rank {}, config says {}",
                    layer.lora().rank,
                    self.lora_rank
                )));
            }
        }
        if self.alpha <= 0.0 || self.lr <= 0.0 {
            return Err(Error::InvalidArgument("alpha and lr must be positive".into()));
        }
        if self.lambda_ortho < 0.0 {
            return Err(Error::InvalidArgument("lambda_ortho must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A small tanh network whose layers are adapted in place.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyModel {
    layers: Vec<AdaptedLayer>,
}

impl ToyModel {
    /// Random base with polynomially decaying spectra and Haar singular
    /// vectors on every layer, identity scaling, zero-delta adapters.
    ///
    /// `dims` lists the layer widths input-first; 2 to 4 layers.
    pub fn generate(
        dims: &[usize],
        decay_alpha: f64,
        base_scale: f64,
        lora_rank: usize,
        lora_alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(3..=5).contains(&dims.len()) {
            return Err(Error::InvalidArgument(format!(
                "expected 2 to 4 layers ({}..{} widths), got {} widths",
                3,
                5,
                dims.len()
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (d_in, d_out) = (dims[l], dims[l + 1]);
            let plain = generate_base(d_out, d_in, decay_alpha, derive_seed(seed, &format!("model/base/{l}")))?;
            let sigma = RealVector::new(plain.sigma().iter().map(|s| s * base_scale).collect())?;
            let base = SvdFactors::from_parts(plain.u().clone(), sigma, plain.vt().clone())?;
            let mut lora_rng = stream(seed, &format!("model/lora/{l}"));
            let lora = LoraAdapter::zero_init(d_out, d_in, lora_rank, lora_alpha, &mut lora_rng)?;
            let rank = base.rank();
            layers.push(AdaptedLayer::new(base, SvfAdapter::identity(rank), lora)?);
        }
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<AdaptedLayer>) -> Result<Self> {
        if !(2..=4).contains(&layers.len()) {
            return Err(Error::InvalidArgument(format!(
                "expected 2 to 4 layers, got {}",
                layers.len()
            )));
        }
        for w in layers.windows(2) {
            if w[1].d_in() != w[0].d_out() {
                return Err(Error::shape(
                    "ToyModel::from_layers",
                    format!("{}", w[0].d_out()),
                    format!("{}", w[1].d_in()),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[AdaptedLayer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").d_out()
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.d_out(), l.d_in())).collect()
    }

    /// Effective per-layer weights (scaling applied, delta added).
    pub fn materialized_weights(&self) -> Result<Vec<DenseMatrix>> {
        self.layers.iter().map(|l| l.materialize()).collect()
    }

    pub fn forward(&self, x: &RealVector) -> Result<RealVector> {
        let weights = self.materialized_weights()?;
        let x_mat = DenseMatrix::from_fn(x.len(), 1, |i, _| x[i]);
        let out = forward_with_weights(&weights, &x_mat)?;
        Ok(out.column(0))
    }

    /// Inputs as columns; returns outputs as columns.
    pub fn forward_batch(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        forward_with_weights(&self.materialized_weights()?, x)
    }

    pub fn set_layer_svf(&mut self, layer: usize, svf: SvfAdapter) -> Result<()> {
        self.layers[layer].set_svf(svf)
    }

    /// Re-initialize every adapter at a new rank. Base and scaling stay.
    pub fn reset_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let mut rng = stream(seed, &format!("model/lora/{l}"));
            layer.reset_lora(rank, alpha, &mut rng)?;
        }
        Ok(())
    }

    /// Bit pattern of every frozen quantity (base factors and scaling);
    /// knowledge injection must leave it untouched.
    pub fn frozen_fingerprint(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        for layer in &self.layers {
            let base = layer.base_svd();
            bits.extend(base.u().as_slice().iter().map(|v| v.to_bits()));
            bits.extend(base.sigma().iter().map(|v| v.to_bits()));
            bits.extend(base.vt().as_slice().iter().map(|v| v.to_bits()));
            bits.extend(layer.svf().z.iter().map(|v| v.to_bits()));
        }
        bits
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [AdaptedLayer] {
        &mut self.layers
    }
}

/// Run the tanh network given materialized weights; inputs as columns.
pub fn forward_with_weights(weights: &[DenseMatrix], x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut h = x.clone();
    for (l, w) in weights.iter().enumerate() {
        h = w.matmul(&h)?;
        if l + 1 < weights.len() {
            h = tanh_map(&h);
        }
    }
    Ok(h)
}

fn tanh_map(m: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)].tanh())
}

fn forward_trace(weights: &[DenseMatrix], x: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
    let layer_count = weights.len();
    let mut acts: Vec<DenseMatrix> = Vec::with_capacity(layer_count + 1);
    acts.push(x.clone());
    for (l, w) in weights.iter().enumerate() {
        let z = w.matmul(&acts[l])?;
        acts.push(if l + 1 < layer_count { tanh_map(&z) } else { z });
    }
    Ok(acts)
}

/// Reverse-mode accumulation through the tanh stack, starting from the
/// loss gradient at the network output.
fn backprop(
    weights: &[DenseMatrix],
    acts: &[DenseMatrix],
    delta_out: DenseMatrix,
) -> Result<Vec<DenseMatrix>> {
    let layer_count = weights.len();
    let mut grads: Vec<DenseMatrix> = (0..layer_count).map(|_| DenseMatrix::zeros(1, 1)).collect();
    let mut delta = delta_out;
    for l in (0..layer_count).rev() {
        // delta currently holds dL/d(post-activation of layer l).
        let d_pre = if l + 1 < layer_count {
            let h = &acts[l + 1];
            DenseMatrix::from_fn(h.rows(), h.cols(), |i, j| delta[(i, j)] * (1.0 - h[(i, j)] * h[(i, j)]))
        } else {
            delta
        };
        grads[l] = d_pre.matmul(&acts[l].transpose())?;
        delta = weights[l].transpose().matmul(&d_pre)?;
    }
    Ok(grads)
}

/// Mean over the batch of half the squared output error.
pub fn batch_loss(weights: &[DenseMatrix], x: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    let out = forward_with_weights(weights, x)?;
    let diff = out.sub(y)?;
    Ok(diff.frobenius_norm().powi(2) / (2.0 * x.cols() as f64))
}

/// Loss plus the gradient of the loss with respect to every effective
/// layer weight.
pub fn loss_and_weight_grads(
    weights: &[DenseMatrix],
    x: &DenseMatrix,
    y: &DenseMatrix,
) -> Result<(f64, Vec<DenseMatrix>)> {
    let acts = forward_trace(weights, x)?;
    let batch = x.cols() as f64;
    let diff = acts[weights.len()].sub(y)?;
    let loss = diff.frobenius_norm().powi(2) / (2.0 * batch);
    let grads = backprop(weights, &acts, diff.scale(1.0 / batch))?;
    Ok((loss, grads))
}

/// Mean over the batch of half the squared error between the readout
/// coordinates of the output and target coordinates.
pub fn readout_loss(
    weights: &[DenseMatrix],
    readout: &DenseMatrix,
    x: &DenseMatrix,
    y_coords: &DenseMatrix,
) -> Result<f64> {
    let out = forward_with_weights(weights, x)?;
    let diff = readout.transpose().matmul(&out)?.sub(y_coords)?;
    Ok(diff.frobenius_norm().powi(2) / (2.0 * x.cols() as f64))
}

/// Readout loss plus its gradient with respect to every effective layer
/// weight; the output-side gradient is the coordinate error pushed back
/// through the readout.
pub fn readout_loss_and_grads(
    weights: &[DenseMatrix],
    readout: &DenseMatrix,
    x: &DenseMatrix,
    y_coords: &DenseMatrix,
) -> Result<(f64, Vec<DenseMatrix>)> {
    let acts = forward_trace(weights, x)?;
    let batch = x.cols() as f64;
    let diff = readout.transpose().matmul(&acts[weights.len()])?.sub(y_coords)?;
    let loss = diff.frobenius_norm().powi(2) / (2.0 * batch);
    let delta_out = readout.matmul(&diff)?.scale(1.0 / batch);
    let grads = backprop(weights, &acts, delta_out)?;
    Ok((loss, grads))
}

/// A regression skill supported on a low-dimensional input subspace that
/// is misaligned with the first layer's principal right singular vectors.
///
/// Inputs are drawn inside the subspace and targets depend on them only
/// through the subspace coordinates, so `f(x) = f(P x)` holds exactly by
/// construction. The skill observes the model through a fixed orthonormal
/// output readout, the way a task score reads only the answer-bearing
/// part of a representation: skill error is measured between the readout
/// coordinates of the output and the target coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkillTask {
    /// Orthonormal basis of the task subspace, in_dim x s.
    pub v_task: DenseMatrix,
    /// Orthonormal output readout, out_dim x s.
    pub readout: DenseMatrix,
    /// Linear map from subspace coordinates to target readout
    /// coordinates, s x s.
    pub target_map: DenseMatrix,
    /// Coordinate scale of sampled inputs; `sqrt(in_dim / s)` matches the
    /// norm of an isotropic ambient input.
    pub input_scale: f64,
    pub sample_count: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SkillTask {
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        model: &ToyModel,
        s: usize,
        protected_k: usize,
        misalignment: f64,
        target_scale: f64,
        sample_count: usize,
        noise_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let base0 = model.layers()[0].base_svd();
        let mut basis_rng = stream(seed, "skill/basis");
        let (v_task, _) = misaligned_task_basis(base0, protected_k, s, misalignment, &mut basis_rng)?;
        let input_scale = (model.in_dim() as f64 / s as f64).sqrt();
        let mut readout_rng = stream(seed, "skill/readout");
        let readout = crate::matrix::orthonormalize_columns(&DenseMatrix::gaussian(
            model.out_dim(),
            s,
            &mut readout_rng,
        ))?;
        let mut map_rng = stream(seed, "skill/map");
        let target_map = DenseMatrix::gaussian(s, s, &mut map_rng).scale(target_scale);
        Ok(Self {
            v_task,
            readout,
            target_map,
            input_scale,
            sample_count,
            noise_scale,
            seed,
        })
    }

    pub fn s(&self) -> usize {
        self.v_task.cols()
    }

    pub fn in_dim(&self) -> usize {
        self.v_task.rows()
    }

    /// Draw `n` (input, target-coordinate) pairs from the named stream.
    pub fn sample(&self, n: usize, label: &str) -> Result<(DenseMatrix, DenseMatrix)> {
        let mut rng = stream(self.seed, label);
        let coords = DenseMatrix::gaussian(self.s(), n, &mut rng).scale(self.input_scale);
        let x = self.v_task.matmul(&coords)?;
        let mut y = self.target_map.matmul(&coords)?;
        if self.noise_scale > 0.0 {
            y = y.add(&DenseMatrix::gaussian(y.rows(), y.cols(), &mut rng).scale(self.noise_scale))?;
        }
        Ok((x, y))
    }

    /// The fixed training set.
    pub fn training_data(&self) -> Result<(DenseMatrix, DenseMatrix)> {
        self.sample(self.sample_count, "skill/train")
    }

    /// Held-out evaluation stream, disjoint from training by label.
    pub fn eval_data(&self, n: usize) -> Result<(DenseMatrix, DenseMatrix)> {
        self.sample(n, "skill/eval")
    }
}

/// Key-value pairs to memorize: unit-norm mutually distinct keys, values
/// produced by a hidden low-rank perturbation of the current model (so a
/// matching-rank adapter can represent them exactly).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactSet {
    pub pairs: Vec<(RealVector, RealVector)>,
}

const MIN_KEY_DISTANCE: f64 = 0.1;

impl FactSet {
    /// Generate `count` facts against the model's current behavior.
    ///
    /// `teacher_scale` sets the relative Frobenius size of the hidden
    /// per-layer perturbation; zero makes the values coincide with the
    /// model's own outputs (nothing to learn), which also serves as the
    /// already-known anchor set.
    pub fn generate(
        model: &ToyModel,
        count: usize,
        teacher_rank: usize,
        teacher_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("fact count must be positive".into()));
        }
        let in_dim = model.in_dim();
        let mut key_rng = stream(seed, "facts/keys");
        let mut keys: Vec<RealVector> = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while keys.len() < count {
            attempts += 1;
            if attempts > 200 * count {
                return Err(Error::InvalidArgument(format!(
                    "could not place {count} keys at pairwise distance > {MIN_KEY_DISTANCE}"
                )));
            }
            let candidate = RealVector::gaussian(in_dim, &mut key_rng).normalized()?;
            if keys
                .iter()
                .all(|k| k.sub(&candidate).expect("same length").norm() > MIN_KEY_DISTANCE)
            {
                keys.push(candidate);
            }
        }

        let mut teacher = model.materialized_weights()?;
        if teacher_scale > 0.0 && teacher_rank > 0 {
            let mut t_rng = stream(seed, "facts/teacher");
            for w in teacher.iter_mut() {
                let b = DenseMatrix::gaussian(w.rows(), teacher_rank, &mut t_rng);
                let a = DenseMatrix::gaussian(teacher_rank, w.cols(), &mut t_rng);
                let delta = b.matmul(&a)?;
                let rescale = teacher_scale * w.frobenius_norm() / delta.frobenius_norm();
                *w = w.add(&delta.scale(rescale))?;
            }
        }

        let pairs = keys
            .into_iter()
            .map(|k| {
                let k_mat = DenseMatrix::from_fn(in_dim, 1, |i, _| k[i]);
                let v = forward_with_weights(&teacher, &k_mat)?.column(0);
                Ok((k, v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stack the selected pairs as column matrices.
    pub fn batch(&self, indices: &[usize]) -> (DenseMatrix, DenseMatrix) {
        let in_dim = self.pairs[0].0.len();
        let out_dim = self.pairs[0].1.len();
        let x = DenseMatrix::from_fn(in_dim, indices.len(), |i, j| self.pairs[indices[j]].0[i]);
        let y = DenseMatrix::from_fn(out_dim, indices.len(), |i, j| self.pairs[indices[j]].1[i]);
        (x, y)
    }

    pub fn batch_all(&self) -> (DenseMatrix, DenseMatrix) {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }

    /// Concatenate with another set (used to mix in anchor facts).
    pub fn extended_with(&self, other: &FactSet) -> FactSet {
        let mut pairs = self.pairs.clone();
        pairs.extend(other.pairs.iter().cloned());
        FactSet { pairs }
    }
}

/// Per-epoch training telemetry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub sft_loss: f64,
    pub ortho_per_layer: Vec<f64>,
    pub interference: f64,
}

/// Outcome of one knowledge-injection run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: ProtectionMode,
    pub seed: u64,
    pub per_epoch: Vec<EpochMetrics>,
    pub skill_loss_before: f64,
    pub skill_loss_after: f64,
    pub fact_recall: f64,
    pub final_interference: f64,
}

impl RunMetrics {
    pub fn skill_degradation(&self) -> f64 {
        self.skill_loss_after - self.skill_loss_before
    }
}

/// Outcome of probe training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Phase1Result {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub converged: bool,
    pub svf: Vec<SvfAdapter>,
    pub subspaces: Vec<CriticalSubspace>,
}

/// Train the scaling vectors on explicit data by full-batch gradient
/// descent and freeze the identified subspaces at size `k`. Targets are
/// given in the coordinates of `readout` (orthonormal columns).
///
/// Requires identity-initialized scaling on entry. The per-layer scaling
/// gradient is the spectral loading of that layer's weight gradient
/// weighted by its singular values.
pub fn phase1_train_on(
    model: &mut ToyModel,
    x: &DenseMatrix,
    y_coords: &DenseMatrix,
    readout: &DenseMatrix,
    lr: f64,
    steps: usize,
    k: usize,
) -> Result<Phase1Result> {
    for (l, layer) in model.layers().iter().enumerate() {
        if layer.svf().z.iter().any(|&z| z != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "phase 1 requires identity-initialized scaling, layer {l} deviates"
            )));
        }
    }
    let defect = crate::matrix::orthonormality_defect(readout);
    if defect > 1e-8 {
        return Err(Error::NotOrthonormal {
            what: "skill readout",
            deviation: defect,
        });
    }

    let initial_loss = readout_loss(&model.materialized_weights()?, readout, x, y_coords)?;
    for step in 0..steps {
        let weights = model.materialized_weights()?;
        let (loss, grads) = readout_loss_and_grads(&weights, readout, x, y_coords)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        for (l, layer) in model.layers_mut().iter_mut().enumerate() {
            let gz = svf_loss_gradient(&grads[l], layer.base_svd())?;
            let z = RealVector::new(
                layer
                    .svf()
                    .z
                    .iter()
                    .zip(gz.iter())
                    .map(|(z, g)| z - lr * g)
                    .collect(),
            )?;
            layer.set_svf(SvfAdapter::new(z))?;
        }
    }
    let final_loss = readout_loss(&model.materialized_weights()?, readout, x, y_coords)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence { step: steps });
    }

    let mut svf = Vec::with_capacity(model.layer_count());
    let mut subspaces = Vec::with_capacity(model.layer_count());
    for (l, layer) in model.layers().iter().enumerate() {
        svf.push(layer.svf().clone());
        subspaces.push(build_critical_subspace(
            layer.base_svd(),
            layer.svf(),
            k,
            format!("layer{l}"),
        )?);
    }
    Ok(Phase1Result {
        initial_loss,
        final_loss,
        converged: final_loss < initial_loss,
        svf,
        subspaces,
    })
}

/// Phase 1 on a skill task's training set.
pub fn phase1_train_svf(
    model: &mut ToyModel,
    skill: &SkillTask,
    lr: f64,
    steps: usize,
    k: usize,
) -> Result<Phase1Result> {
    let (x, y) = skill.training_data()?;
    phase1_train_on(model, &x, &y, &skill.readout, lr, steps, k)
}

/// Squared Frobenius norm of the effective update's action on the
/// protected output directions: `|delta' u_crit|_F^2`.
pub fn ortho_loss(lora: &LoraAdapter, crit: &CriticalSubspace) -> Result<f64> {
    if crit.u_crit.rows() != lora.d_out() {
        return Err(Error::shape(
            "ortho_loss",
            format!("{} rows", lora.d_out()),
            format!("{} rows", crit.u_crit.rows()),
        ));
    }
    let delta = lora_delta(lora);
    let projected = crit.u_crit.transpose().matmul(&delta)?;
    Ok(projected.frobenius_norm().powi(2))
}

/// Analytic gradients of [`ortho_loss`] with respect to the adapter
/// factors, chain rule through the `alpha / rank` scaling:
/// `dB = 2 s P delta a'` and `dA = 2 s b' P delta`, with `P` the
/// projector onto the protected span.
pub fn ortho_loss_grads(lora: &LoraAdapter, crit: &CriticalSubspace) -> Result<(DenseMatrix, DenseMatrix)> {
    if crit.u_crit.rows() != lora.d_out() {
        return Err(Error::shape(
            "ortho_loss_grads",
            format!("{} rows", lora.d_out()),
            format!("{} rows", crit.u_crit.rows()),
        ));
    }
    let s = lora.scaling();
    let delta = lora_delta(lora);
    let coords = crit.u_crit.transpose().matmul(&delta)?;
    let projected = crit.u_crit.matmul(&coords)?;
    let grad_b = projected.matmul(&lora.a.transpose())?.scale(2.0 * s);
    let grad_a = lora.b.transpose().matmul(&projected)?.scale(2.0 * s);
    Ok((grad_b, grad_a))
}

/// Affine combination of the data-fit loss with the per-layer penalties.
pub fn total_loss(sft: f64, ortho_per_layer: &[f64], lambda_ortho: f64) -> f64 {
    sft + lambda_ortho * ortho_per_layer.iter().sum::<f64>()
}

/// Implicit (proximal) step on the penalty term for one adapter.
///
/// The penalty is quadratic in each factor given the other, so the
/// backward-Euler update has a closed form: the protected-span rows of
/// `b` and the whole of `a` are shrunk through small rank-sized solves.
/// Unlike an explicit gradient step this is stable for every penalty
/// weight at a fixed learning rate, and it degenerates to the hard
/// projection of the complement baseline as the weight grows.
fn apply_penalty_prox(
    lora: &mut LoraAdapter,
    crit: &CriticalSubspace,
    lambda: f64,
    lr: f64,
) -> Result<()> {
    let s = lora.scaling();
    let c = 2.0 * lambda * lr * s * s;
    let r = lora.rank;
    let u = &crit.u_crit;

    // b: minimize lambda s^2 |u' b a|^2 + |b - b0|^2 / (2 lr). Only the
    // u-span rows move: bu = bu0 (I + c a a')^{-1}.
    let bu0 = u.transpose().matmul(&lora.b)?;
    let gram_a = lora.a.matmul(&lora.a.transpose())?;
    let m_b = DenseMatrix::identity(r).add(&gram_a.scale(c))?;
    // bu = bu0 m^{-1}  <=>  m' x = bu0', with m symmetric.
    let bu = crate::matrix::solve_linear(&m_b, &bu0.transpose())?.transpose();
    lora.b = lora.b.sub(&u.matmul(&bu0.sub(&bu)?)?)?;

    // a with the updated b: a = (I + c b' u u' b)^{-1} a0.
    let bu_new = u.transpose().matmul(&lora.b)?;
    let gram_b = bu_new.transpose().matmul(&bu_new)?;
    let m_a = DenseMatrix::identity(r).add(&gram_b.scale(c))?;
    lora.a = crate::matrix::solve_linear(&m_a, &lora.a)?;
    Ok(())
}

/// Evaluation knobs for a knowledge-injection run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Phase2Options {
    pub recall_tol: f64,
    pub eval_samples: usize,
    /// Already-known facts mixed into the training pool (recall is still
    /// measured on the new facts only).
    pub anchors: Option<FactSet>,
}

impl Default for Phase2Options {
    fn default() -> Self {
        Self {
            recall_tol: 0.1,
            eval_samples: 256,
            anchors: None,
        }
    }
}

/// Inject facts through the adapters under the configured protection
/// mode. Base factors and scaling stay frozen (verified bitwise); only
/// the low-rank factors move.
pub fn phase2_inject(
    model: &mut ToyModel,
    facts: &FactSet,
    skill: &SkillTask,
    cfg: &TrainConfig,
    crit: &[CriticalSubspace],
    opts: &Phase2Options,
) -> Result<RunMetrics> {
    cfg.validate(model)?;
    if crit.len() != model.layer_count() {
        return Err(Error::InvalidArgument(format!(
            "expected {} critical subspaces, got {}",
            model.layer_count(),
            crit.len()
        )));
    }
    if facts.is_empty() {
        return Err(Error::InvalidArgument("fact set is empty".into()));
    }

    let fingerprint = model.frozen_fingerprint();
    let penalty = penalty_subspaces(model, cfg, crit)?;
    let lambda = match cfg.protection_mode {
        ProtectionMode::None | ProtectionMode::OrthComplement => 0.0,
        _ => cfg.lambda_ortho,
    };
    let project_hard = cfg.protection_mode == ProtectionMode::OrthComplement;

    let skill_loss_before = evaluate_skill(model, skill, opts.eval_samples)?;

    let pool = match &opts.anchors {
        Some(anchors) => facts.extended_with(anchors),
        None => facts.clone(),
    };
    let pool_len = pool.len();

    // The scaled base is frozen for the whole phase; only the delta moves.
    let frozen_base: Vec<DenseMatrix> = model
        .layers()
        .iter()
        .map(|l| crate::adapters::svf_apply(l.base_svd(), l.svf()))
        .collect::<Result<_>>()?;
    let effective = |model: &ToyModel| -> Result<Vec<DenseMatrix>> {
        model
            .layers()
            .iter()
            .zip(&frozen_base)
            .map(|(l, base)| base.add(&lora_delta(l.lora())))
            .collect()
    };

    let mut per_epoch = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pool_len).collect();
        order.shuffle(&mut stream(cfg.seed, &format!("phase2/shuffle/{epoch}")));

        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = pool.batch(chunk);
            let weights = effective(model)?;
            let (loss, grads) = loss_and_weight_grads(&weights, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: epoch * pool_len.div_ceil(cfg.batch_size) + b,
                });
            }
            for (l, layer) in model.layers_mut().iter_mut().enumerate() {
                let s = layer.lora().scaling();
                let grad_b = grads[l].matmul(&layer.lora().a.transpose())?.scale(s);
                let grad_a = layer.lora().b.transpose().matmul(&grads[l])?.scale(s);
                {
                    let lora = layer.lora_mut();
                    lora.b = lora.b.sub(&grad_b.scale(cfg.lr))?;
                    lora.a = lora.a.sub(&grad_a.scale(cfg.lr))?;
                }
                if lambda != 0.0 {
                    apply_penalty_prox(layer.lora_mut(), &penalty[l], lambda, cfg.lr)?;
                }
                if project_hard {
                    let lora = layer.lora_mut();
                    let u = &penalty[l].u_crit;
                    let coords = u.transpose().matmul(&lora.b)?;
                    lora.b = lora.b.sub(&u.matmul(&coords)?)?;
                }
            }
        }

        let (fx, fy) = pool.batch_all();
        let sft_loss = batch_loss(&effective(model)?, &fx, &fy)?;
        if !sft_loss.is_finite() {
            return Err(Error::Divergence {
                step: (epoch + 1) * pool_len.div_ceil(cfg.batch_size),
            });
        }
        let ortho_per_layer: Vec<f64> = model
            .layers()
            .iter()
            .zip(&penalty)
            .map(|(layer, sub)| ortho_loss(layer.lora(), sub))
            .collect::<Result<_>>()?;
        let interference = ortho_per_layer.iter().sum();
        per_epoch.push(EpochMetrics {
            epoch,
            sft_loss,
            ortho_per_layer,
            interference,
        });
    }

    let skill_loss_after = evaluate_skill(model, skill, opts.eval_samples)?;
    let fact_recall = evaluate_recall(model, facts, opts.recall_tol)?;
    let final_interference = model
        .layers()
        .iter()
        .zip(&penalty)
        .map(|(layer, sub)| ortho_loss(layer.lora(), sub))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum::<f64>();

    if model.frozen_fingerprint() != fingerprint {
        return Err(Error::InvariantViolation(
            "frozen parameters changed during knowledge injection".into(),
        ));
    }

    Ok(RunMetrics {
        mode: cfg.protection_mode,
        seed: cfg.seed,
        per_epoch,
        skill_loss_before,
        skill_loss_after,
        fact_recall,
        final_interference,
    })
}

/// Resolve the per-layer subspace the run penalizes (or, for the
/// unconstrained mode, measures against).
fn penalty_subspaces(
    model: &ToyModel,
    cfg: &TrainConfig,
    crit: &[CriticalSubspace],
) -> Result<Vec<CriticalSubspace>> {
    match cfg.protection_mode {
        ProtectionMode::SvfGuided | ProtectionMode::None => Ok(crit.to_vec()),
        ProtectionMode::TopkRaw | ProtectionMode::OrthComplement => model
            .layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let indices: Vec<usize> = (0..cfg.k).collect();
                subspace_from_indices(layer.base_svd(), &indices, format!("layer{l}"))
            })
            .collect(),
        ProtectionMode::RandomK => model
            .layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let rank = layer.base_svd().rank();
                let mut rng = stream(cfg.seed, &format!("phase2/random_k/{l}"));
                let mut all: Vec<usize> = (0..rank).collect();
                all.shuffle(&mut rng);
                let mut indices = all[..cfg.k].to_vec();
                indices.sort_unstable();
                subspace_from_indices(layer.base_svd(), &indices, format!("layer{l}"))
            })
            .collect(),
    }
}

/// Mean-squared skill error on a fresh held-out sample stream, measured
/// in the task's readout coordinates.
pub fn evaluate_skill(model: &ToyModel, skill: &SkillTask, n_eval: usize) -> Result<f64> {
    let (x, y) = skill.eval_data(n_eval)?;
    readout_loss(&model.materialized_weights()?, &skill.readout, &x, &y)
}

/// Fraction of fact keys whose output lands within `tol` (relative
/// Euclidean distance) of the stored value.
pub fn evaluate_recall(model: &ToyModel, facts: &FactSet, tol: f64) -> Result<f64> {
    if facts.is_empty() {
        return Ok(1.0);
    }
    let (x, y) = facts.batch_all();
    let out = model.forward_batch(&x)?;
    let mut hits = 0usize;
    for j in 0..facts.len() {
        let mut dist_sq = 0.0;
        let mut norm_sq = 0.0;
        for i in 0..y.rows() {
            let d = out[(i, j)] - y[(i, j)];
            dist_sq += d * d;
            norm_sq += y[(i, j)] * y[(i, j)];
        }
        let rel = if norm_sq > 0.0 {
            (dist_sq / norm_sq).sqrt()
        } else {
            dist_sq.sqrt()
        };
        if rel <= tol {
            hits += 1;
        }
    }
    Ok(hits as f64 / facts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream;
    use crate::svd::svd;

    fn tiny_model(seed: u64) -> ToyModel {
        ToyModel::generate(&[6, 5, 4], 1.0, 1.5, 2, 8.0, seed).unwrap()
    }

    #[test]
    fn model_shapes_and_zero_initial_delta() {
        let m = tiny_model(0);
        assert_eq!(m.in_dim(), 6);
        assert_eq!(m.out_dim(), 4);
        assert_eq!(m.layer_dims(), vec![(5, 6), (4, 5)]);
        for layer in m.layers() {
            assert_eq!(lora_delta(layer.lora()).max_abs(), 0.0);
        }
    }

    #[test]
    fn model_rejects_wrong_depth() {
        assert!(ToyModel::generate(&[4, 4], 1.0, 1.0, 2, 8.0, 0).is_err());
        assert!(ToyModel::generate(&[4; 7], 1.0, 1.0, 2, 8.0, 0).is_err());
    }

    #[test]
    fn forward_single_matches_batch() {
        let m = tiny_model(1);
        let x = RealVector::gaussian(6, &mut stream(1, "x"));
        let single = m.forward(&x).unwrap();
        let x_mat = DenseMatrix::from_fn(6, 1, |i, _| x[i]);
        let batch = m.forward_batch(&x_mat).unwrap();
        assert!(single.sub(&batch.column(0)).unwrap().norm() <= 1e-15);
    }

    #[test]
    fn skill_targets_depend_only_on_subspace() {
        let m = tiny_model(2);
        let task = SkillTask::generate(&m, 2, 2, 0.0, 0.5, 16, 0.0, 7).unwrap();
        let (x, y) = task.sample(8, "check").unwrap();
        // Project inputs onto the task subspace and recompute targets.
        let coords = task.v_task.transpose().matmul(&x).unwrap();
        let projected = task.v_task.matmul(&coords).unwrap();
        let coords2 = task.v_task.transpose().matmul(&projected).unwrap();
        let y2 = task.target_map.matmul(&coords2).unwrap();
        assert!(y.max_abs_diff(&y2).unwrap() <= 1e-12);
    }

    #[test]
    fn fact_keys_are_unit_norm_and_distinct() {
        let m = tiny_model(3);
        let facts = FactSet::generate(&m, 12, 2, 0.3, 5).unwrap();
        for (k, _) in &facts.pairs {
            assert!((k.norm() - 1.0).abs() <= 1e-12);
        }
        for i in 0..facts.len() {
            for j in (i + 1)..facts.len() {
                let d = facts.pairs[i].0.sub(&facts.pairs[j].0).unwrap().norm();
                assert!(d > MIN_KEY_DISTANCE);
            }
        }
    }

    #[test]
    fn zero_scale_facts_match_model_behavior() {
        let m = tiny_model(4);
        let facts = FactSet::generate(&m, 5, 2, 0.0, 6).unwrap();
        for (k, v) in &facts.pairs {
            let out = m.forward(k).unwrap();
            assert!(out.sub(v).unwrap().norm() <= 1e-12);
        }
    }

    #[test]
    fn ortho_loss_zero_adapter() {
        let m = tiny_model(5);
        let layer = &m.layers()[0];
        let sub = subspace_from_indices(layer.base_svd(), &[0, 1], "layer0").unwrap();
        assert_eq!(ortho_loss(layer.lora(), &sub).unwrap(), 0.0);
    }

    #[test]
    fn ortho_loss_unit_dyad_on_protected_direction() {
        // delta = u1 v1' with alpha = rank = 1, protected index {1}.
        let mut rng = stream(21, "dyad");
        let base = svd(&DenseMatrix::gaussian(5, 5, &mut rng)).unwrap();
        let u1 = base.left_vector(1);
        let v1 = base.right_vector(1);
        let b = DenseMatrix::from_fn(5, 1, |i, _| u1[i]);
        let a = DenseMatrix::from_fn(1, 5, |_, j| v1[j]);
        let lora = LoraAdapter::new(b, a, 1.0).unwrap();
        let sub = subspace_from_indices(&base, &[1], "layer0").unwrap();
        let loss = ortho_loss(&lora, &sub).unwrap();
        assert!((loss - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ortho_loss_matches_dense_oracle() {
        let mut rng = stream(21, "dense-oracle");
        let base = svd(&DenseMatrix::gaussian(7, 6, &mut rng)).unwrap();
        let b = DenseMatrix::gaussian(7, 3, &mut rng);
        let a = DenseMatrix::gaussian(3, 6, &mut rng);
        let lora = LoraAdapter::new(b, a, 32.0).unwrap();
        let sub = subspace_from_indices(&base, &[0, 2, 5], "layer0").unwrap();

        let delta = lora_delta(&lora);
        let oracle = delta
            .transpose()
            .matmul(&sub.u_crit)
            .unwrap()
            .frobenius_norm()
            .powi(2);
        let got = ortho_loss(&lora, &sub).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn total_loss_is_affine() {
        assert_eq!(total_loss(3.5, &[1.0, 2.0], 0.0), 3.5);
        assert_eq!(total_loss(0.0, &[2.0], 10.0), 20.0);
        let base = total_loss(1.0, &[0.5, 0.25], 1.0);
        let double = total_loss(1.0, &[0.5, 0.25], 2.0);
        let triple = total_loss(1.0, &[0.5, 0.25], 3.0);
        assert!((double - base - 0.75).abs() <= 1e-15);
        assert!((triple - double - 0.75).abs() <= 1e-15);
    }

    #[test]
    fn phase1_zero_steps_leaves_identity() {
        let mut m = tiny_model(6);
        let task = SkillTask::generate(&m, 2, 2, 0.0, 0.5, 32, 0.0, 8).unwrap();
        let result = phase1_train_svf(&mut m, &task, 1e-2, 0, 2).unwrap();
        assert_eq!(result.initial_loss, result.final_loss);
        assert!(!result.converged);
        for layer in m.layers() {
            assert!(layer.svf().z.iter().all(|&z| z == 1.0));
        }
    }

    #[test]
    fn phase1_already_optimal_fixed_point() {
        // Targets produced by the model itself: gradient on z is zero.
        let mut m = tiny_model(7);
        let x = DenseMatrix::gaussian(6, 24, &mut stream(7, "fix"));
        let y = m.forward_batch(&x).unwrap();
        let full_readout = DenseMatrix::identity(4);
        phase1_train_on(&mut m, &x, &y, &full_readout, 1e-2, 50, 2).unwrap();
        for layer in m.layers() {
            for &z in layer.svf().z.as_slice() {
                assert!((z - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn phase1_requires_identity_init() {
        let mut m = tiny_model(8);
        m.set_layer_svf(0, SvfAdapter::new(RealVector::new(vec![1.1; 5]).unwrap())).unwrap();
        let task = SkillTask::generate(&m, 2, 2, 0.0, 0.5, 16, 0.0, 9).unwrap();
        assert!(phase1_train_svf(&mut m, &task, 1e-2, 5, 2).is_err());
    }

    #[test]
    fn recall_with_infinite_tolerance_is_one() {
        let m = tiny_model(9);
        let facts = FactSet::generate(&m, 6, 2, 0.4, 10).unwrap();
        assert_eq!(evaluate_recall(&m, &facts, f64::INFINITY).unwrap(), 1.0);
    }

    #[test]
    fn skill_eval_is_deterministic() {
        let m = tiny_model(10);
        let task = SkillTask::generate(&m, 2, 2, 0.0, 0.5, 16, 0.0, 11).unwrap();
        let a = evaluate_skill(&m, &task, 64).unwrap();
        let b = evaluate_skill(&m, &task, 64).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn zero_model_on_zero_task_scores_zero() {
        let mut m = tiny_model(11);
        for l in 0..m.layer_count() {
            let rank = m.layers()[l].base_svd().rank();
            m.set_layer_svf(l, SvfAdapter::new(RealVector::zeros(rank))).unwrap();
        }
        let task = SkillTask::generate(&m, 2, 2, 0.0, 0.0, 16, 0.0, 12).unwrap();
        assert_eq!(evaluate_skill(&m, &task, 32).unwrap(), 0.0);
    }

    #[test]
    fn protection_mode_names_round_trip() {
        for mode in ProtectionMode::ALL {
            assert_eq!(ProtectionMode::from_str(mode.name()).unwrap(), mode);
        }
        assert!(ProtectionMode::from_str("bogus").is_err());
    }
}
