//! Shared oracles for the integration suites. Everything here is written
//! against the definitions, independent of the library's computation
//! paths, so it can serve as a reference to test those paths against.

use svlab_core::{DenseMatrix, RealVector};

/// One-sided Jacobi SVD: rotate column pairs of a working copy until all
/// columns are mutually orthogonal, then read off norms as singular
/// values. Completely independent of the bidiagonalization route.
pub fn jacobi_svd(w: &DenseMatrix) -> (DenseMatrix, Vec<f64>, DenseMatrix) {
    if w.rows() >= w.cols() {
        jacobi_tall(w)
    } else {
        let (u, s, vt) = jacobi_tall(&w.transpose());
        (vt.transpose(), s, u.transpose())
    }
}

fn jacobi_tall(w: &DenseMatrix) -> (DenseMatrix, Vec<f64>, DenseMatrix) {
    let m = w.rows();
    let n = w.cols();
    let mut a = w.clone();
    let mut v = DenseMatrix::identity(n);

    let col_dot = |mat: &DenseMatrix, i: usize, j: usize| -> f64 {
        (0..mat.rows()).map(|p| mat[(p, i)] * mat[(p, j)]).sum()
    };

    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let aii = col_dot(&a, i, i);
                let ajj = col_dot(&a, j, j);
                let aij = col_dot(&a, i, j);
                off = off.max(aij.abs() / (aii * ajj).sqrt().max(f64::MIN_POSITIVE));
                if aij.abs() <= 1e-30 {
                    continue;
                }
                let zeta = (ajj - aii) / (2.0 * aij);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for p in 0..m {
                    let api = a[(p, i)];
                    let apj = a[(p, j)];
                    a[(p, i)] = c * api - s * apj;
                    a[(p, j)] = s * api + c * apj;
                }
                for p in 0..n {
                    let vpi = v[(p, i)];
                    let vpj = v[(p, j)];
                    v[(p, i)] = c * vpi - s * vpj;
                    v[(p, j)] = s * vpi + c * vpj;
                }
            }
        }
        if off <= 1e-14 {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|p| a[(p, j)] * a[(p, j)]).sum::<f64>().sqrt())
        .collect();

    // Sort descending, permuting all factors.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap());
    let a_sorted = DenseMatrix::from_fn(m, n, |p, j| a[(p, order[j])]);
    let v_sorted = DenseMatrix::from_fn(n, n, |p, j| v[(p, order[j])]);
    sigma = order.iter().map(|&j| sigma[j]).collect();

    let mut u = DenseMatrix::zeros(m, n);
    for j in 0..n {
        if sigma[j] > 1e-300 {
            for p in 0..m {
                u[(p, j)] = a_sorted[(p, j)] / sigma[j];
            }
        }
    }
    (u, sigma, v_sorted.transpose())
}

/// Classical Gram-Schmidt projector oracle: orthonormalize the basis the
/// slow way and assemble the projector matrix entry by entry.
pub fn gram_schmidt_projector(basis: &DenseMatrix) -> DenseMatrix {
    let n = basis.rows();
    let mut q: Vec<RealVector> = Vec::new();
    for j in 0..basis.cols() {
        let mut col = basis.column(j);
        for prev in &q {
            let coeff = col.dot(prev).unwrap();
            col = col.sub(&prev.scale(coeff)).unwrap();
        }
        let norm = col.norm();
        assert!(norm > 1e-12, "rank-deficient basis in oracle");
        q.push(col.scale(1.0 / norm));
    }
    let mut p = DenseMatrix::zeros(n, n);
    for qv in &q {
        for i in 0..n {
            for j in 0..n {
                p[(i, j)] += qv[i] * qv[j];
            }
        }
    }
    p
}

/// Central finite difference of a scalar function of a flat parameter
/// vector.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for i in 0..x.len() {
        let keep = work[i];
        work[i] = keep + step;
        let plus = f(&work);
        work[i] = keep - step;
        let minus = f(&work);
        work[i] = keep;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative error with a floor on the denominator so that near-zero
/// coordinates compare absolutely at the floor's scale.
pub fn relative_error(analytic: f64, reference: f64, floor: f64) -> f64 {
    (analytic - reference).abs() / reference.abs().max(floor)
}

/// Max relative disagreement between an analytic gradient and a central
/// finite difference, with the scale floor applied per coordinate.
pub fn max_gradient_disagreement(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| relative_error(a, r, floor))
        .fold(0.0, f64::max)
}
