//! Every analytic gradient in the library against central finite
//! differences: the scaling-vector gradient identity on quadratic
//! losses, the orthogonality-penalty gradients, and the full backprop
//! chain through the toy network.

mod common;

use common::{central_difference, max_gradient_disagreement};
use rand::Rng;
use svlab_core::adapters::{svf_apply, LoraAdapter, SvfAdapter};
use svlab_core::matrix::orthonormalize_columns;
use svlab_core::probe::{subspace_from_indices, svf_loss_gradient};
use svlab_core::seeding::stream;
use svlab_core::svd::SvdFactors;
use svlab_core::trainer::{
    loss_and_weight_grads, ortho_loss, ortho_loss_grads, ToyModel,
};
use svlab_core::{svd, DenseMatrix, RealVector};

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;

/// Base factors with Haar vectors and log-spaced singular values in
/// [0.5, 2]; keeps every scaling coordinate's gradient well away from
/// zero so relative comparisons are meaningful.
fn well_conditioned_base(m: usize, n: usize, rng: &mut impl rand::Rng) -> SvdFactors {
    let r = m.min(n);
    let u = orthonormalize_columns(&DenseMatrix::gaussian(m, r, rng)).unwrap();
    let v = orthonormalize_columns(&DenseMatrix::gaussian(n, r, rng)).unwrap();
    let sigma: Vec<f64> = (0..r)
        .map(|i| 2.0 * (0.25f64).powf(i as f64 / (r.max(2) - 1) as f64))
        .collect();
    SvdFactors::from_parts(u, RealVector::new(sigma).unwrap(), v.transpose()).unwrap()
}

#[test]
fn scaling_gradient_matches_finite_differences_on_quadratic_losses() {
    // L(z) = 1/2 |W_z - T|_F^2, so grad_W L = W_z - T and the analytic
    // z-gradient is sigma_i * gamma_i of that matrix.
    for case in 0..50u64 {
        let mut rng = stream(case, "gradcheck/svf");
        let m = 3 + (case as usize % 5);
        let n = 3 + ((case as usize / 5) % 5);
        let base = well_conditioned_base(m, n, &mut rng);
        let target = DenseMatrix::gaussian(m, n, &mut rng);
        let z0: Vec<f64> = (0..base.rank())
            .map(|_| 1.0 + 0.3 * (rng.gen::<f64>() - 0.5))
            .collect();

        let loss = |z: &[f64]| -> f64 {
            let w = svf_apply(&base, &SvfAdapter::new(RealVector::new(z.to_vec()).unwrap())).unwrap();
            0.5 * w.sub(&target).unwrap().frobenius_norm().powi(2)
        };

        let w_z = svf_apply(&base, &SvfAdapter::new(RealVector::new(z0.clone()).unwrap())).unwrap();
        let grad_w = w_z.sub(&target).unwrap();
        let analytic = svf_loss_gradient(&grad_w, &base).unwrap();

        let mut f = |z: &[f64]| loss(z);
        let numeric = central_difference(&mut f, &z0, FD_STEP);
        let worst = max_gradient_disagreement(analytic.as_slice(), &numeric, 1e-3);
        assert!(worst <= REL_TOL, "case {case}: max relative error {worst:.3e}");
    }
}

#[test]
fn scaling_gradient_at_identity_matches_too() {
    // Same check at the exact initialization point z = 1.
    for case in 0..10u64 {
        let mut rng = stream(case, "gradcheck/svf-id");
        let base = well_conditioned_base(6, 6, &mut rng);
        let target = DenseMatrix::gaussian(6, 6, &mut rng);
        let z0 = vec![1.0; base.rank()];

        let w_z = svf_apply(&base, &SvfAdapter::new(RealVector::new(z0.clone()).unwrap())).unwrap();
        let analytic = svf_loss_gradient(&w_z.sub(&target).unwrap(), &base).unwrap();

        let mut f = |z: &[f64]| -> f64 {
            let w = svf_apply(&base, &SvfAdapter::new(RealVector::new(z.to_vec()).unwrap())).unwrap();
            0.5 * w.sub(&target).unwrap().frobenius_norm().powi(2)
        };
        let numeric = central_difference(&mut f, &z0, FD_STEP);
        let worst = max_gradient_disagreement(analytic.as_slice(), &numeric, 1e-3);
        assert!(worst <= REL_TOL, "case {case}: max relative error {worst:.3e}");
    }
}

#[test]
fn penalty_gradients_match_finite_differences() {
    for case in 0..50u64 {
        let mut rng = stream(case, "gradcheck/ortho");
        let d_out = 4 + (case as usize % 4);
        let d_in = 4 + ((case as usize / 4) % 4);
        let rank = 1 + (case as usize % 3);
        let base = well_conditioned_base(d_out, d_in, &mut rng);
        let k = 1 + (case as usize % 3).min(base.rank() - 1);
        let indices: Vec<usize> = (0..k).collect();
        let sub = subspace_from_indices(&base, &indices, "gradcheck").unwrap();

        let b0 = DenseMatrix::gaussian(d_out, rank, &mut rng);
        let a0 = DenseMatrix::gaussian(rank, d_in, &mut rng);
        let alpha = 32.0;
        let lora = LoraAdapter::new(b0.clone(), a0.clone(), alpha).unwrap();
        let (grad_b, grad_a) = ortho_loss_grads(&lora, &sub).unwrap();

        let mut loss_of_b = |flat: &[f64]| -> f64 {
            let b = DenseMatrix::new(d_out, rank, flat.to_vec()).unwrap();
            ortho_loss(&LoraAdapter::new(b, a0.clone(), alpha).unwrap(), &sub).unwrap()
        };
        let numeric_b = central_difference(&mut loss_of_b, b0.as_slice(), FD_STEP);
        let worst_b = max_gradient_disagreement(grad_b.as_slice(), &numeric_b, 1e-3);
        assert!(worst_b <= REL_TOL, "case {case}: dB max relative error {worst_b:.3e}");

        let mut loss_of_a = |flat: &[f64]| -> f64 {
            let a = DenseMatrix::new(rank, d_in, flat.to_vec()).unwrap();
            ortho_loss(&LoraAdapter::new(b0.clone(), a, alpha).unwrap(), &sub).unwrap()
        };
        let numeric_a = central_difference(&mut loss_of_a, a0.as_slice(), FD_STEP);
        let worst_a = max_gradient_disagreement(grad_a.as_slice(), &numeric_a, 1e-3);
        assert!(worst_a <= REL_TOL, "case {case}: dA max relative error {worst_a:.3e}");
    }
}

#[test]
fn backprop_weight_gradients_match_finite_differences() {
    // The reverse-mode weight gradients through the tanh stack drive
    // both training phases; check them entry by entry on a small net.
    for case in 0..5u64 {
        let mut rng = stream(case, "gradcheck/backprop");
        let model = ToyModel::generate(&[5, 4, 3], 1.0, 1.2, 2, 8.0, case).unwrap();
        let weights = model.materialized_weights().unwrap();
        let x = DenseMatrix::gaussian(5, 7, &mut rng);
        let y = DenseMatrix::gaussian(3, 7, &mut rng);

        let (_, grads) = loss_and_weight_grads(&weights, &x, &y).unwrap();

        for l in 0..weights.len() {
            let shape = (weights[l].rows(), weights[l].cols());
            let mut f = |flat: &[f64]| -> f64 {
                let mut perturbed = weights.clone();
                perturbed[l] = DenseMatrix::new(shape.0, shape.1, flat.to_vec()).unwrap();
                svlab_core::trainer::batch_loss(&perturbed, &x, &y).unwrap()
            };
            let numeric = central_difference(&mut f, weights[l].as_slice(), FD_STEP);
            let worst = max_gradient_disagreement(grads[l].as_slice(), &numeric, 1e-3);
            assert!(worst <= REL_TOL, "case {case}, layer {l}: max relative error {worst:.3e}");
        }
    }
}

#[test]
fn phase_one_z_gradient_through_network_matches_finite_differences() {
    // The chain used by phase 1: spectral loading of the backprop weight
    // gradient versus numerically differentiating the network loss in z.
    for case in 0..5u64 {
        let mut rng = stream(case, "gradcheck/phase1");
        let model = ToyModel::generate(&[5, 4, 3], 1.0, 1.2, 2, 8.0, 100 + case).unwrap();
        let x = DenseMatrix::gaussian(5, 9, &mut rng);
        let y = DenseMatrix::gaussian(3, 9, &mut rng);

        let weights = model.materialized_weights().unwrap();
        let (_, grads) = loss_and_weight_grads(&weights, &x, &y).unwrap();

        for l in 0..model.layer_count() {
            let base = model.layers()[l].base_svd().clone();
            let analytic = svf_loss_gradient(&grads[l], &base).unwrap();

            let z0 = vec![1.0; base.rank()];
            let mut f = |z: &[f64]| -> f64 {
                let mut perturbed = weights.clone();
                perturbed[l] = svf_apply(&base, &SvfAdapter::new(RealVector::new(z.to_vec()).unwrap())).unwrap();
                svlab_core::trainer::batch_loss(&perturbed, &x, &y).unwrap()
            };
            let numeric = central_difference(&mut f, &z0, FD_STEP);
            let worst = max_gradient_disagreement(analytic.as_slice(), &numeric, 1e-4);
            assert!(worst <= REL_TOL, "case {case}, layer {l}: max relative error {worst:.3e}");
        }
    }
}

#[test]
fn rank_bound_of_effective_update() {
    // The effective update of a rank-r adapter never exceeds rank r.
    let mut rng = stream(11, "gradcheck/rank");
    let b = DenseMatrix::gaussian(10, 4, &mut rng);
    let a = DenseMatrix::gaussian(4, 9, &mut rng);
    let lora = LoraAdapter::new(b, a, 32.0).unwrap();
    let f = svd(&svlab_core::adapters::lora_delta(&lora)).unwrap();
    assert!(f.sigma()[4] <= 1e-10 * f.sigma()[0]);
}
