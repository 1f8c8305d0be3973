//! Thin singular value decomposition for dense real matrices.
//!
//! The pipeline is Householder bidiagonalization followed by implicit-shift
//! (Golub-Kahan) QR iteration on the bidiagonal band. Results follow a fixed
//! sign convention so that singular vectors persisted in one run can be
//! compared bit-for-bit against vectors computed in another: in every left
//! singular vector the entry of largest magnitude (ties broken by lowest row
//! index) is nonnegative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{orthonormality_defect, DenseMatrix, RealVector};

const EPS: f64 = f64::EPSILON;

/// Thin SVD `w = u diag(sigma) vt` with `rank = min(rows, cols)`.
///
/// Invariants: `u` has orthonormal columns, `vt` has orthonormal rows,
/// `sigma` is nonincreasing and nonnegative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SvdFactorsRepr", into = "SvdFactorsRepr")]
pub struct SvdFactors {
    u: DenseMatrix,
    sigma: RealVector,
    vt: DenseMatrix,
}

#[derive(Serialize, Deserialize)]
struct SvdFactorsRepr {
    u: DenseMatrix,
    sigma: RealVector,
    vt: DenseMatrix,
}

impl From<SvdFactors> for SvdFactorsRepr {
    fn from(f: SvdFactors) -> Self {
        SvdFactorsRepr {
            u: f.u,
            sigma: f.sigma,
            vt: f.vt,
        }
    }
}

impl TryFrom<SvdFactorsRepr> for SvdFactors {
    type Error = Error;
    fn try_from(r: SvdFactorsRepr) -> Result<Self> {
        SvdFactors::from_parts(r.u, r.sigma, r.vt)
    }
}

impl SvdFactors {
    /// Assemble factors from components, validating every invariant.
    pub fn from_parts(u: DenseMatrix, sigma: RealVector, vt: DenseMatrix) -> Result<Self> {
        let r = sigma.len();
        if u.cols() != r || vt.rows() != r {
            return Err(Error::shape(
                "SvdFactors::from_parts",
                format!("u cols == vt rows == {r}"),
                format!("u cols {}, vt rows {}", u.cols(), vt.rows()),
            ));
        }
        for i in 0..r {
            if sigma.as_slice()[i] < 0.0 {
                return Err(Error::InvalidArgument(format!("sigma[{i}] is negative")));
            }
            if i + 1 < r && sigma.as_slice()[i] < sigma.as_slice()[i + 1] {
                return Err(Error::InvalidArgument(format!(
                    "sigma is not nonincreasing at index {i}"
                )));
            }
        }
        let u_defect = orthonormality_defect(&u);
        if u_defect > 1e-10 {
            return Err(Error::NotOrthonormal {
                what: "left singular vectors",
                deviation: u_defect,
            });
        }
        let v_defect = orthonormality_defect(&vt.transpose());
        if v_defect > 1e-10 {
            return Err(Error::NotOrthonormal {
                what: "right singular vectors",
                deviation: v_defect,
            });
        }
        Ok(SvdFactors { u, sigma, vt })
    }

    pub fn u(&self) -> &DenseMatrix {
        &self.u
    }

    pub fn sigma(&self) -> &RealVector {
        &self.sigma
    }

    pub fn vt(&self) -> &DenseMatrix {
        &self.vt
    }

    /// Number of retained components, `min(rows, cols)` of the source.
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn out_dim(&self) -> usize {
        self.u.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.vt.cols()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.as_slice().first().copied().unwrap_or(0.0)
    }

    /// Left singular vector `i` (column of `u`).
    pub fn left_vector(&self, i: usize) -> RealVector {
        self.u.column(i)
    }

    /// Right singular vector `i` (row of `vt`).
    pub fn right_vector(&self, i: usize) -> RealVector {
        RealVector::new(self.vt.row(i).to_vec()).expect("factor rows are finite")
    }

    /// Materialize `u diag(sigma) vt`.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.scaled_reconstruct(self.sigma.as_slice())
    }

    /// Materialize `u diag(weights) vt` for arbitrary per-component weights.
    pub(crate) fn scaled_reconstruct(&self, weights: &[f64]) -> DenseMatrix {
        debug_assert_eq!(weights.len(), self.rank());
        let mut scaled = self.vt.clone();
        for i in 0..self.rank() {
            let w = weights[i];
            for j in 0..scaled.cols() {
                scaled[(i, j)] *= w;
            }
        }
        self.u.matmul(&scaled).expect("factor shapes are consistent")
    }
}

/// Compute the thin SVD of `w` under the fixed sign convention.
///
/// Deterministic: identical input bytes produce identical output bytes.
/// Fails with the iteration count if the QR stage does not converge.
pub fn svd(w: &DenseMatrix) -> Result<SvdFactors> {
    if !w.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    let (mut u, sigma, mut vt) = if w.rows() >= w.cols() {
        svd_tall(w)?
    } else {
        // w = (w')' : factor the transpose and swap the sides.
        let (ut, sigma, vtt) = svd_tall(&w.transpose())?;
        (vtt.transpose(), sigma, ut.transpose())
    };
    apply_sign_convention(&mut u, &mut vt);
    SvdFactors::from_parts(u, RealVector::new(sigma)?, vt)
}

/// Largest singular value.
pub fn spectral_norm(a: &DenseMatrix) -> Result<f64> {
    Ok(svd(a)?.sigma_max())
}

/// Fix signs: the largest-magnitude entry of each left singular vector
/// (ties broken by lowest index) is made nonnegative, negating the paired
/// right singular vector when a flip occurs.
fn apply_sign_convention(u: &mut DenseMatrix, vt: &mut DenseMatrix) {
    for i in 0..u.cols() {
        let mut best_row = 0;
        let mut best_abs = -1.0;
        for p in 0..u.rows() {
            let a = u[(p, i)].abs();
            if a > best_abs {
                best_abs = a;
                best_row = p;
            }
        }
        if u[(best_row, i)] < 0.0 {
            for p in 0..u.rows() {
                u[(p, i)] = -u[(p, i)];
            }
            for q in 0..vt.cols() {
                vt[(i, q)] = -vt[(i, q)];
            }
        }
    }
}

/// Thin SVD of a tall (rows >= cols) matrix, without the sign convention.
fn svd_tall(w: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    let m = w.rows();
    let n = w.cols();
    debug_assert!(m >= n);

    let mut work = w.clone();
    let mut u = DenseMatrix::zeros(m, m);
    let mut v = DenseMatrix::zeros(n, n);
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n.saturating_sub(1)];

    bidiagonalize(&mut work, &mut u, &mut v, &mut diag, &mut off);
    bidiagonal_qr(&mut diag, &mut off, &mut u, &mut v, 40 * m.max(n))?;

    // Thin slices: the first n columns of U carry the singular triplets.
    let u_thin = DenseMatrix::from_fn(m, n, |i, j| u[(i, j)]);
    let vt = v.transpose();
    Ok((u_thin, diag, vt))
}

/// Householder bidiagonalization of a tall matrix, accumulating the left
/// transform into `u` (m x m) and the right transform into `v` (n x n).
/// On return `diag`/`off` hold the bidiagonal bands and `a` holds the
/// reflector tails.
fn bidiagonalize(
    a: &mut DenseMatrix,
    u: &mut DenseMatrix,
    v: &mut DenseMatrix,
    diag: &mut [f64],
    off: &mut [f64],
) {
    let m = a.rows();
    let n = a.cols();

    for i in 0..m {
        u[(i, i)] = 1.0;
    }
    for i in 0..n {
        v[(i, i)] = 1.0;
    }

    for k in 0..n {
        // Left reflector: zero a[k+1.., k].
        let mut norm_sq = 0.0;
        for i in k..m {
            norm_sq += a[(i, k)] * a[(i, k)];
        }

        if norm_sq > EPS * EPS {
            let norm = norm_sq.sqrt();
            let akk = a[(k, k)];
            let sigma = if akk.abs() < EPS { norm } else { norm * akk.signum() };
            let v0 = akk + sigma;
            a[(k, k)] = v0;
            for i in (k + 1)..m {
                a[(i, k)] /= v0;
            }
            let tau = v0 / sigma;

            // Apply to trailing columns.
            for j in (k + 1)..n {
                let mut dot = a[(k, j)];
                for i in (k + 1)..m {
                    dot += a[(i, k)] * a[(i, j)];
                }
                dot *= tau;
                a[(k, j)] -= dot;
                for i in (k + 1)..m {
                    let vi = a[(i, k)];
                    a[(i, j)] -= dot * vi;
                }
            }

            // Accumulate U.
            for row in 0..m {
                let mut dot = u[(row, k)];
                for i in (k + 1)..m {
                    dot += u[(row, i)] * a[(i, k)];
                }
                dot *= tau;
                u[(row, k)] -= dot;
                for i in (k + 1)..m {
                    let vi = a[(i, k)];
                    u[(row, i)] -= dot * vi;
                }
            }

            diag[k] = -sigma;
        } else {
            diag[k] = a[(k, k)];
        }

        // Right reflector: zero a[k, k+2..].
        if k + 2 <= n.saturating_sub(1) {
            let mut norm_sq = 0.0;
            for j in (k + 1)..n {
                norm_sq += a[(k, j)] * a[(k, j)];
            }

            if norm_sq > EPS * EPS {
                let norm = norm_sq.sqrt();
                let ak1 = a[(k, k + 1)];
                let sigma = if ak1.abs() < EPS { norm } else { norm * ak1.signum() };
                let v0 = ak1 + sigma;
                a[(k, k + 1)] = v0;
                for j in (k + 2)..n {
                    a[(k, j)] /= v0;
                }
                let tau = v0 / sigma;

                // Apply from the right to the rows below.
                for i in (k + 1)..m {
                    let mut dot = a[(i, k + 1)];
                    for j in (k + 2)..n {
                        dot += a[(i, j)] * a[(k, j)];
                    }
                    dot *= tau;
                    a[(i, k + 1)] -= dot;
                    for j in (k + 2)..n {
                        let vj = a[(k, j)];
                        a[(i, j)] -= dot * vj;
                    }
                }

                // Accumulate V.
                for row in 0..n {
                    let mut dot = v[(row, k + 1)];
                    for j in (k + 2)..n {
                        dot += v[(row, j)] * a[(k, j)];
                    }
                    dot *= tau;
                    v[(row, k + 1)] -= dot;
                    for j in (k + 2)..n {
                        let vj = a[(k, j)];
                        v[(row, j)] -= dot * vj;
                    }
                }

                off[k] = -sigma;
            } else {
                off[k] = a[(k, k + 1)];
            }
        } else if k + 1 < n {
            off[k] = a[(k, k + 1)];
        }
    }
}

fn givens(a: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        (1.0, 0.0)
    } else {
        let r = a.hypot(b);
        (a / r, b / r)
    }
}

/// Implicit-shift QR iteration on a bidiagonal band.
///
/// On success `diag` holds nonnegative singular values sorted descending
/// and the rotations are accumulated into `u` and `v`.
fn bidiagonal_qr(
    diag: &mut [f64],
    off: &mut [f64],
    u: &mut DenseMatrix,
    v: &mut DenseMatrix,
    max_iter: usize,
) -> Result<()> {
    let n = diag.len();
    if n == 0 {
        return Ok(());
    }
    if n == 1 {
        if diag[0] < 0.0 {
            diag[0] = -diag[0];
            for row in 0..u.rows() {
                u[(row, 0)] = -u[(row, 0)];
            }
        }
        return Ok(());
    }

    let mut iter = 0usize;
    let mut hi = n - 1;

    while hi > 0 {
        // Deflate a negligible trailing off-diagonal.
        {
            let threshold = EPS * (diag[hi - 1].abs() + diag[hi].abs());
            if off[hi - 1].abs() <= threshold {
                off[hi - 1] = 0.0;
                hi -= 1;
                continue;
            }
        }

        // Find the start of the unreduced block.
        let mut lo = hi - 1;
        while lo > 0 {
            let threshold = EPS * (diag[lo - 1].abs() + diag[lo].abs());
            if off[lo - 1].abs() <= threshold {
                off[lo - 1] = 0.0;
                break;
            }
            lo -= 1;
        }

        iter += 1;
        if iter > max_iter {
            return Err(Error::SvdNonConvergence { iterations: iter });
        }

        // A zero diagonal entry breaks the shift formula; chase the
        // adjacent off-diagonal off the bottom with left rotations first.
        {
            let mut found_zero = false;
            for idx in lo..hi {
                if diag[idx].abs() <= EPS {
                    diag[idx] = 0.0;
                    let mut z = off[idx];
                    off[idx] = 0.0;
                    for j in (idx + 1)..=hi {
                        let (c, s) = givens(diag[j], z);
                        diag[j] = c * diag[j] + s * z;
                        if j < hi {
                            z = -s * off[j];
                            off[j] = c * off[j];
                        }
                        for row in 0..u.rows() {
                            let uj = u[(row, j)];
                            let ui = u[(row, idx)];
                            u[(row, j)] = c * uj + s * ui;
                            u[(row, idx)] = c * ui - s * uj;
                        }
                    }
                    found_zero = true;
                    break;
                }
            }
            if found_zero {
                continue;
            }
        }

        // Wilkinson shift from the trailing 2x2 of B'B.
        let d_hi = diag[hi];
        let d_hi1 = diag[hi - 1];
        let e_hi1 = off[hi - 1];
        let e_hi2 = if hi >= 2 && hi - 2 >= lo { off[hi - 2] } else { 0.0 };

        let t11 = d_hi1 * d_hi1 + e_hi2 * e_hi2;
        let t12 = d_hi1 * e_hi1;
        let t22 = d_hi * d_hi + e_hi1 * e_hi1;

        let d = (t11 - t22) / 2.0;
        let sign_d = if d >= 0.0 { 1.0 } else { -1.0 };
        let mu = t22 - t12 * t12 / (d + sign_d * (d * d + t12 * t12).sqrt());

        // Implicit QR chase.
        let mut x = diag[lo] * diag[lo] - mu;
        let mut z = diag[lo] * off[lo];

        for k in lo..hi {
            let (c, s) = givens(x, z);
            if k > lo {
                off[k - 1] = c * x + s * z;
            }

            let dk = diag[k];
            let ek = off[k];
            let dk1 = diag[k + 1];

            diag[k] = c * dk + s * ek;
            off[k] = c * ek - s * dk;
            let bulge = s * dk1;
            diag[k + 1] = c * dk1;

            for row in 0..v.rows() {
                let vk = v[(row, k)];
                let vk1 = v[(row, k + 1)];
                v[(row, k)] = c * vk + s * vk1;
                v[(row, k + 1)] = c * vk1 - s * vk;
            }

            let (c2, s2) = givens(diag[k], bulge);
            diag[k] = c2 * diag[k] + s2 * bulge;
            let old_ek = off[k];
            let old_dk1 = diag[k + 1];
            off[k] = c2 * old_ek + s2 * old_dk1;
            diag[k + 1] = c2 * old_dk1 - s2 * old_ek;

            if k + 1 < hi {
                let old_ek1 = off[k + 1];
                x = off[k];
                z = s2 * old_ek1;
                off[k + 1] = c2 * old_ek1;
            }

            for row in 0..u.rows() {
                let uk = u[(row, k)];
                let uk1 = u[(row, k + 1)];
                u[(row, k)] = c2 * uk + s2 * uk1;
                u[(row, k + 1)] = c2 * uk1 - s2 * uk;
            }
        }
    }

    // Nonnegative singular values.
    for i in 0..n {
        if diag[i] < 0.0 {
            diag[i] = -diag[i];
            for row in 0..u.rows() {
                u[(row, i)] = -u[(row, i)];
            }
        }
    }

    // Stable selection sort, descending, permuting U and V columns along.
    for i in 0..n {
        let mut max_idx = i;
        for j in (i + 1)..n {
            if diag[j] > diag[max_idx] {
                max_idx = j;
            }
        }
        if max_idx != i {
            diag.swap(i, max_idx);
            for row in 0..u.rows() {
                let tmp = u[(row, i)];
                u[(row, i)] = u[(row, max_idx)];
                u[(row, max_idx)] = tmp;
            }
            for row in 0..v.rows() {
                let tmp = v[(row, i)];
                v[(row, i)] = v[(row, max_idx)];
                v[(row, max_idx)] = tmp;
            }
        }
    }

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::orthonormality_defect;
    use crate::seeding::stream;

    fn relative_reconstruction_error(w: &DenseMatrix, f: &SvdFactors) -> f64 {
        let err = f.reconstruct().sub(w).unwrap().frobenius_norm();
        let scale = w.frobenius_norm();
        if scale == 0.0 {
            err
        } else {
            err / scale
        }
    }

    #[test]
    fn identity_3x3() {
        let w = DenseMatrix::identity(3);
        let f = svd(&w).unwrap();
        assert!(f.u().max_abs_diff(&DenseMatrix::identity(3)).unwrap() <= 1e-12);
        assert!(f.vt().max_abs_diff(&DenseMatrix::identity(3)).unwrap() <= 1e-12);
        for &s in f.sigma().as_slice() {
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn diagonal_3_2_1() {
        let w = DenseMatrix::from_diag(&[3.0, 2.0, 1.0]);
        let f = svd(&w).unwrap();
        assert_eq!(f.sigma().as_slice(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn diagonal_with_negative_entry() {
        let w = DenseMatrix::from_diag(&[-3.0, 2.0]);
        let f = svd(&w).unwrap();
        assert!((f.sigma().as_slice()[0] - 3.0).abs() <= 1e-12);
        assert!((f.sigma().as_slice()[1] - 2.0).abs() <= 1e-12);
        assert!(relative_reconstruction_error(&w, &f) <= 1e-14);
    }

    #[test]
    fn known_2x2() {
        // A'A = [[13, 12], [12, 13]] with eigenvalues 25 and 1.
        let w = DenseMatrix::new(2, 2, vec![3.0, 2.0, 2.0, 3.0]).unwrap();
        let f = svd(&w).unwrap();
        assert!((f.sigma().as_slice()[0] - 5.0).abs() <= 1e-12);
        assert!((f.sigma().as_slice()[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn one_by_one() {
        let f = svd(&DenseMatrix::new(1, 1, vec![-7.0]).unwrap()).unwrap();
        assert_eq!(f.sigma().as_slice(), &[7.0]);
        assert!(relative_reconstruction_error(&DenseMatrix::new(1, 1, vec![-7.0]).unwrap(), &f) <= 1e-15);
    }

    #[test]
    fn single_column_and_single_row() {
        let col = DenseMatrix::new(4, 1, vec![1.0, 2.0, 2.0, 0.0]).unwrap();
        let f = svd(&col).unwrap();
        assert!((f.sigma().as_slice()[0] - 3.0).abs() <= 1e-12);
        assert!(relative_reconstruction_error(&col, &f) <= 1e-14);

        let row = col.transpose();
        let f = svd(&row).unwrap();
        assert!((f.sigma().as_slice()[0] - 3.0).abs() <= 1e-12);
        assert!(relative_reconstruction_error(&row, &f) <= 1e-14);
    }

    #[test]
    fn zero_matrix() {
        let w = DenseMatrix::zeros(3, 2);
        let f = svd(&w).unwrap();
        assert_eq!(f.sigma().as_slice(), &[0.0, 0.0]);
        assert!(orthonormality_defect(f.u()) <= 1e-14);
    }

    #[test]
    fn rank_deficient() {
        let w = DenseMatrix::new(3, 3, vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 3.0, 6.0, 9.0]).unwrap();
        let f = svd(&w).unwrap();
        let s = f.sigma().as_slice();
        assert!(s[0] > 1.0);
        assert!(s[1].abs() <= 1e-9);
        assert!(s[2].abs() <= 1e-9);
        assert!(relative_reconstruction_error(&w, &f) <= 1e-13);
    }

    #[test]
    fn wide_matrix_reconstruction() {
        let mut rng = stream(10, "wide");
        let w = DenseMatrix::gaussian(3, 7, &mut rng);
        let f = svd(&w).unwrap();
        assert_eq!(f.u().rows(), 3);
        assert_eq!(f.u().cols(), 3);
        assert_eq!(f.vt().rows(), 3);
        assert_eq!(f.vt().cols(), 7);
        assert!(relative_reconstruction_error(&w, &f) <= 1e-13);
        assert!(orthonormality_defect(f.u()) <= 1e-13);
        assert!(orthonormality_defect(&f.vt().transpose()) <= 1e-13);
    }

    #[test]
    fn sign_convention_flips_are_consistent() {
        let mut rng = stream(11, "signs");
        let w = DenseMatrix::gaussian(6, 4, &mut rng);
        let f = svd(&w).unwrap();
        for i in 0..f.rank() {
            let col = f.left_vector(i);
            let mut best = (0usize, -1.0f64);
            for (p, &x) in col.as_slice().iter().enumerate() {
                if x.abs() > best.1 {
                    best = (p, x.abs());
                }
            }
            assert!(col[best.0] >= 0.0, "column {i} violates the sign convention");
        }
        // Flipping still reconstructs.
        assert!(relative_reconstruction_error(&w, &f) <= 1e-13);
    }

    #[test]
    fn spectral_norm_examples() {
        assert!((spectral_norm(&DenseMatrix::identity(4)).unwrap() - 1.0).abs() <= 1e-12);
        assert!((spectral_norm(&DenseMatrix::from_diag(&[5.0, 1.0])).unwrap() - 5.0).abs() <= 1e-12);
    }

    #[test]
    fn spectral_norm_bounded_by_frobenius() {
        let mut rng = stream(3, "specnorm");
        let w = DenseMatrix::gaussian(6, 6, &mut rng);
        let s = spectral_norm(&w).unwrap();
        assert!(s <= w.frobenius_norm() + 1e-12);
        assert!(s > 0.0);
    }

    #[test]
    fn determinism_same_bytes_in_same_bytes_out() {
        let mut rng = stream(12, "determinism");
        let w = DenseMatrix::gaussian(16, 9, &mut rng);
        let f1 = svd(&w).unwrap();
        let f2 = svd(&w).unwrap();
        let bits = |m: &DenseMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(f1.u()), bits(f2.u()));
        assert_eq!(bits(f1.vt()), bits(f2.vt()));
        let sbits = |s: &RealVector| s.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(sbits(f1.sigma()), sbits(f2.sigma()));
    }
}
