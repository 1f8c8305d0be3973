//! The two adaptation mechanisms co-located on a shared weight matrix.
//!
//! An [`AdaptedLayer`] keeps its pre-trained base only through its SVD
//! factors. A frozen [`SvfAdapter`] rescales the singular values, and a
//! trainable [`LoraAdapter`] adds a low-rank update; the effective weight
//! is the sum of both contributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, RealVector};
use crate::svd::SvdFactors;

/// Standard deviation for the Gaussian init of the LoRA `a` factor.
pub const LORA_INIT_STD: f64 = 0.02;

/// Per-component scaling vector over the singular values of a host layer.
/// Initialized to all ones, which reproduces the base matrix exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvfAdapter {
    pub z: RealVector,
}

impl SvfAdapter {
    pub fn identity(rank: usize) -> Self {
        Self {
            z: RealVector::ones(rank),
        }
    }

    pub fn new(z: RealVector) -> Self {
        Self { z }
    }

    pub fn rank(&self) -> usize {
        self.z.len()
    }

    /// Per-component deviations `|z_i - 1|`.
    pub fn deviations(&self) -> Vec<f64> {
        self.z.iter().map(|z| (z - 1.0).abs()).collect()
    }
}

/// Low-rank factor pair `b a` with scaling `alpha / rank` applied to the
/// effective update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub b: DenseMatrix,
    pub a: DenseMatrix,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(b: DenseMatrix, a: DenseMatrix, alpha: f64) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::shape(
                "LoraAdapter::new",
                format!("b cols == a rows ({})", b.cols()),
                format!("{}", a.rows()),
            ));
        }
        let rank = b.cols();
        if rank == 0 || rank > b.rows().min(a.cols()) {
            return Err(Error::InvalidArgument(format!(
                "lora rank {rank} out of range for a {}x{} layer",
                b.rows(),
                a.cols()
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::InvalidArgument("lora alpha must be positive".into()));
        }
        Ok(Self { b, a, rank, alpha })
    }

    /// Standard init: `a` Gaussian with std 0.02, `b` zero, so the initial
    /// delta is exactly the zero matrix.
    pub fn zero_init(d_out: usize, d_in: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        let a = DenseMatrix::gaussian(rank, d_in, rng).scale(LORA_INIT_STD);
        let b = DenseMatrix::zeros(d_out, rank);
        Self::new(b, a, alpha)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }
}

/// Effective low-rank update `(alpha / rank) * b * a`.
pub fn lora_delta(lora: &LoraAdapter) -> DenseMatrix {
    lora.b
        .matmul(&lora.a)
        .expect("adapter factors are conformable by construction")
        .scale(lora.scaling())
}

/// Apply the scaling vector to the base factors: `u diag(z . sigma) vt`.
/// Preserves the singular directions of the base.
pub fn svf_apply(base: &SvdFactors, svf: &SvfAdapter) -> Result<DenseMatrix> {
    if svf.rank() != base.rank() {
        return Err(Error::shape(
            "svf_apply",
            format!("z of length {}", base.rank()),
            format!("{}", svf.rank()),
        ));
    }
    let weights: Vec<f64> = base
        .sigma()
        .iter()
        .zip(svf.z.iter())
        .map(|(s, z)| s * z)
        .collect();
    Ok(base.scaled_reconstruct(&weights))
}

/// A frozen base (through its SVD), a frozen scaling probe, and a
/// trainable low-rank adapter sharing one weight matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptedLayer {
    base_svd: SvdFactors,
    svf: SvfAdapter,
    lora: LoraAdapter,
}

impl AdaptedLayer {
    pub fn new(base_svd: SvdFactors, svf: SvfAdapter, lora: LoraAdapter) -> Result<Self> {
        if svf.rank() != base_svd.rank() {
            return Err(Error::shape(
                "AdaptedLayer::new",
                format!("svf rank {}", base_svd.rank()),
                format!("{}", svf.rank()),
            ));
        }
        if lora.d_out() != base_svd.out_dim() || lora.d_in() != base_svd.in_dim() {
            return Err(Error::shape(
                "AdaptedLayer::new",
                format!("lora {}x{}", base_svd.out_dim(), base_svd.in_dim()),
                format!("{}x{}", lora.d_out(), lora.d_in()),
            ));
        }
        Ok(Self { base_svd, svf, lora })
    }

    pub fn base_svd(&self) -> &SvdFactors {
        &self.base_svd
    }

    pub fn svf(&self) -> &SvfAdapter {
        &self.svf
    }

    pub fn lora(&self) -> &LoraAdapter {
        &self.lora
    }

    pub(crate) fn lora_mut(&mut self) -> &mut LoraAdapter {
        &mut self.lora
    }

    /// Replace the low-rank adapter (e.g. to change its rank between runs).
    pub fn reset_lora(&mut self, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<()> {
        self.lora = LoraAdapter::zero_init(self.d_out(), self.d_in(), rank, alpha, rng)?;
        Ok(())
    }

    /// Overwrite the scaling probe. Phase 2 never calls this; the trainer
    /// treats the probe as frozen once phase 1 completes.
    pub fn set_svf(&mut self, svf: SvfAdapter) -> Result<()> {
        if svf.rank() != self.base_svd.rank() {
            return Err(Error::shape(
                "set_svf",
                format!("{}", self.base_svd.rank()),
                format!("{}", svf.rank()),
            ));
        }
        self.svf = svf;
        Ok(())
    }

    pub fn d_out(&self) -> usize {
        self.base_svd.out_dim()
    }

    pub fn d_in(&self) -> usize {
        self.base_svd.in_dim()
    }

    /// Materialize the effective weight `svf_apply(base, z) + lora_delta`.
    pub fn materialize(&self) -> Result<DenseMatrix> {
        svf_apply(&self.base_svd, &self.svf)?.add(&lora_delta(&self.lora))
    }
}

/// Apply the composite adapted weight to a vector without materializing
/// it. Equals materializing the weight and multiplying.
pub fn adapted_forward(layer: &AdaptedLayer, x: &RealVector) -> Result<RealVector> {
    if x.len() != layer.d_in() {
        return Err(Error::shape("adapted_forward", layer.d_in().to_string(), x.len().to_string()));
    }
    // Factorized path: u (z . sigma . (vt x)) + scaling * b (a x).
    let base = layer.base_svd();
    let coords = base.vt().matvec(x)?;
    let scaled = RealVector::new(
        coords
            .iter()
            .zip(base.sigma().iter().zip(layer.svf().z.iter()))
            .map(|(c, (s, z))| c * s * z)
            .collect(),
    )?;
    let base_part = base.u().matvec(&scaled)?;
    let lora = layer.lora();
    let lora_part = lora.b.matvec(&lora.a.matvec(x)?)?.scale(lora.scaling());
    base_part.add(&lora_part)
}

/// Number of trainable scaling parameters across layers: the sum of
/// `min(d_out, d_in)` per layer.
pub fn param_count_svf(layer_dims: &[(usize, usize)]) -> usize {
    layer_dims.iter().map(|&(o, i)| o.min(i)).sum()
}

/// Number of trainable low-rank parameters across layers at rank `r`:
/// the sum of `r * (d_out + d_in)` per layer.
pub fn param_count_lora(layer_dims: &[(usize, usize)], r: usize) -> Result<usize> {
    if r == 0 {
        return Err(Error::InvalidArgument("lora rank must be positive".into()));
    }
    Ok(layer_dims.iter().map(|&(o, i)| r * (o + i)).sum())
}
