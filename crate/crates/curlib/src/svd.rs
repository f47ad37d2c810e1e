//! Thin singular value decomposition via one-sided Jacobi rotations, plus the
//! pseudoinverse and matrix norms built on top of it.
//!
//! One-sided Jacobi was chosen over bidiagonalization because it is simple,
//! bit-deterministic for a fixed sweep order, and accurate for the small
//! singular values that feed the interpolation constants in the error bounds.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Hard cap on Jacobi sweeps before giving up.
const MAX_SWEEPS: usize = 100;

/// A column pair is considered orthogonal when its inner product is below
/// this factor times the product of the column norms. Derived from the
/// overall `1e-12 * ||A||_F` rotation-tolerance budget.
const ROT_TOL: f64 = 1e-12;

/// Thin SVD `A = P * diag(sigma) * Q^T` with `k = min(rows, cols)`.
///
/// `p` is `rows x k`, `q` is `cols x k`, `sigma` is descending. The
/// largest-magnitude entry of every column of `p` is non-negative (ties break
/// to the lowest row index), which pins an otherwise arbitrary sign choice.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub p: DenseMatrix,
    pub sigma: Vec<f64>,
    pub q: DenseMatrix,
}

/// Computes the thin SVD of `a`.
///
/// Fails with `InvalidMatrix` on non-finite input and `NumericalFailure` if
/// the sweep cap is exhausted before every column pair is orthogonal.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::InvalidMatrix(
            "svd input contains non-finite entries".into(),
        ));
    }
    let mut result = if a.rows() >= a.cols() {
        jacobi_tall(a)?
    } else {
        // Orthogonalizing columns needs rows >= cols; run on the transpose
        // and swap the factor roles.
        let t = jacobi_tall(&a.transpose())?;
        SvdResult {
            p: t.q,
            sigma: t.sigma,
            q: t.p,
        }
    };
    fix_signs(&mut result.p, &mut result.q);
    Ok(result)
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
///
/// Works on the transpose internally so that every column of the input is a
/// contiguous slice.
fn jacobi_tall(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    // gt row r holds column r of the working matrix; vt row r holds column r
    // of the accumulated right-rotation product.
    let mut gt = a.transpose();
    let mut vt = DenseMatrix::identity(n);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let (top, bottom) = gt.data_mut().split_at_mut(j * m);
                let gi = &mut top[i * m..(i + 1) * m];
                let gj = &mut bottom[..m];
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut cc = 0.0;
                for (x, y) in gi.iter().zip(gj.iter()) {
                    aa += x * x;
                    bb += y * y;
                    cc += x * y;
                }
                if cc.abs() <= ROT_TOL * (aa * bb).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (bb - aa) / (2.0 * cc);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate_rows(gi, gj, cs, sn);
                let (vtop, vbottom) = vt.data_mut().split_at_mut(j * n);
                rotate_rows(
                    &mut vtop[i * n..(i + 1) * n],
                    &mut vbottom[..n],
                    cs,
                    sn,
                );
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NumericalFailure(format!(
            "jacobi svd did not converge within {MAX_SWEEPS} sweeps for {m}x{n} input"
        )));
    }

    // Column norms are the singular values; sort descending, ties keeping the
    // lower original column first.
    let norms: Vec<f64> = (0..n)
        .map(|r| gt.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));

    let scale = a.frobenius();
    let zero_cutoff = scale * f64::EPSILON;
    let mut p = DenseMatrix::zeros(m, n);
    let mut q = DenseMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (col, &r) in order.iter().enumerate() {
        let s = norms[r];
        sigma.push(if s <= zero_cutoff { 0.0 } else { s });
        if s > zero_cutoff {
            for (i, &g) in gt.row(r).iter().enumerate() {
                p.set(i, col, g / s);
            }
        }
        for (i, &v) in vt.row(r).iter().enumerate() {
            q.set(i, col, v);
        }
    }
    complete_null_columns(&mut p, &sigma, zero_cutoff);
    Ok(SvdResult { p, sigma, q })
}

/// In-place plane rotation of two equal-length rows.
fn rotate_rows(ri: &mut [f64], rj: &mut [f64], cs: f64, sn: f64) {
    for (x, y) in ri.iter_mut().zip(rj.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = cs * xi - sn * yj;
        *y = sn * xi + cs * yj;
    }
}

/// Replaces left-singular-vector columns belonging to (numerically) zero
/// singular values with canonical basis vectors orthogonalized against the
/// columns already present, so `P^T P = I` holds even for rank-deficient
/// input.
fn complete_null_columns(p: &mut DenseMatrix, sigma: &[f64], zero_cutoff: f64) {
    let (m, k) = p.shape();
    for col in 0..k {
        if sigma[col] > zero_cutoff {
            continue;
        }
        let mut chosen = None;
        for cand in 0..m {
            let mut v = vec![0.0; m];
            v[cand] = 1.0;
            // Columns not yet filled are all-zero, so projecting against every
            // other column is safe.
            for prev in 0..k {
                if prev == col {
                    continue;
                }
                let dot: f64 = (0..m).map(|i| p.get(i, prev) * v[i]).sum();
                for (i, vi) in v.iter_mut().enumerate() {
                    *vi -= dot * p.get(i, prev);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                chosen = Some((v, norm));
                break;
            }
        }
        let (v, norm) = chosen.expect("canonical basis always completes an orthonormal set");
        for (i, vi) in v.iter().enumerate() {
            p.set(i, col, vi / norm);
        }
    }
}

/// Makes the largest-magnitude entry of each left singular vector
/// non-negative, flipping the paired right vector to keep the product intact.
fn fix_signs(p: &mut DenseMatrix, q: &mut DenseMatrix) {
    let (m, k) = p.shape();
    let n = q.rows();
    for col in 0..k {
        let mut best = 0usize;
        let mut best_abs = p.get(0, col).abs();
        for i in 1..m {
            let a = p.get(i, col).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if p.get(best, col) < 0.0 {
            for i in 0..m {
                p.set(i, col, -p.get(i, col));
            }
            for i in 0..n {
                q.set(i, col, -q.get(i, col));
            }
        }
    }
}

/// Moore-Penrose pseudoinverse via SVD truncation.
///
/// Singular values at or below `rcond * sigma_max` are dropped. `rcond`
/// defaults to `max(rows, cols) * machine_epsilon`.
pub fn pseudoinverse(a: &DenseMatrix, rcond: Option<f64>) -> Result<DenseMatrix> {
    let (m, n) = a.shape();
    let dec = svd(a)?;
    let rcond = rcond.unwrap_or(m.max(n) as f64 * f64::EPSILON);
    let cutoff = rcond * dec.sigma[0];
    let mut out = DenseMatrix::zeros(n, m);
    for (l, &s) in dec.sigma.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..n {
            let qi = dec.q.get(i, l) * inv;
            if qi == 0.0 {
                continue;
            }
            for j in 0..m {
                let v = out.get(i, j) + qi * dec.p.get(j, l);
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

/// Which norm `norm` computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Largest singular value.
    Spectral,
    /// Square root of the sum of squared entries.
    Frobenius,
}

/// Matrix norm of the requested kind. Errors on non-finite entries.
pub fn norm(a: &DenseMatrix, kind: NormKind) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::InvalidMatrix(
            "norm input contains non-finite entries".into(),
        ));
    }
    match kind {
        NormKind::Spectral => Ok(svd(a)?.sigma[0]),
        NormKind::Frobenius => Ok(a.frobenius()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn assert_orthonormal(m: &DenseMatrix, tol: f64) {
        let gram = m.transpose().matmul(m).unwrap();
        let eye = DenseMatrix::identity(m.cols());
        assert!(
            gram.sub(&eye).unwrap().max_abs() < tol,
            "columns not orthonormal: deviation {}",
            gram.sub(&eye).unwrap().max_abs()
        );
    }

    fn assert_reconstructs(a: &DenseMatrix, dec: &SvdResult, tol: f64) {
        let k = dec.sigma.len();
        let mut ps = dec.p.clone();
        for col in 0..k {
            for i in 0..ps.rows() {
                ps.set(i, col, ps.get(i, col) * dec.sigma[col]);
            }
        }
        let rec = ps.matmul(&dec.q.transpose()).unwrap();
        let err = rec.sub(a).unwrap().frobenius();
        let scale = a.frobenius().max(1.0);
        assert!(err <= tol * scale, "reconstruction error {err} vs scale {scale}");
    }

    #[test]
    fn identity_is_its_own_svd() {
        let dec = svd(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(dec.sigma, vec![1.0, 1.0, 1.0]);
        assert_eq!(dec.p, DenseMatrix::identity(3));
        assert_eq!(dec.q, DenseMatrix::identity(3));
    }

    #[test]
    fn diagonal_sorts_descending_with_permutation() {
        let a = DenseMatrix::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        let dec = svd(&a).unwrap();
        assert_eq!(dec.sigma, vec![3.0, 2.0, 1.0]);
        // P is the permutation sending sorted order back to the original axes.
        assert_eq!(dec.p.get(2, 0), 1.0);
        assert_eq!(dec.p.get(1, 1), 1.0);
        assert_eq!(dec.p.get(0, 2), 1.0);
        assert_reconstructs(&a, &dec, 1e-12);
    }

    #[test]
    fn random_tall_matrix_factors_cleanly() {
        let a = random_matrix(8, 5, 7);
        let dec = svd(&a).unwrap();
        assert_orthonormal(&dec.p, 1e-10);
        assert_orthonormal(&dec.q, 1e-10);
        assert_reconstructs(&a, &dec, 1e-8);
        for w in dec.sigma.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn random_wide_matrix_factors_cleanly() {
        let a = random_matrix(3, 7, 11);
        let dec = svd(&a).unwrap();
        assert_eq!(dec.p.shape(), (3, 3));
        assert_eq!(dec.q.shape(), (7, 3));
        assert_orthonormal(&dec.p, 1e-10);
        assert_orthonormal(&dec.q, 1e-10);
        assert_reconstructs(&a, &dec, 1e-8);
    }

    #[test]
    fn rank_one_input_pads_an_orthonormal_null_space() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 0.0, -1.0];
        let a = DenseMatrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        let dec = svd(&a).unwrap();
        assert!(dec.sigma[0] > 0.0);
        assert_eq!(dec.sigma[1], 0.0);
        assert_eq!(dec.sigma[2], 0.0);
        assert_orthonormal(&dec.p, 1e-10);
        assert_reconstructs(&a, &dec, 1e-10);
    }

    #[test]
    fn svd_is_bit_deterministic() {
        let a = random_matrix(10, 6, 42);
        let d1 = svd(&a).unwrap();
        let d2 = svd(&a).unwrap();
        assert_eq!(d1.p.data(), d2.p.data());
        assert_eq!(d1.sigma, d2.sigma);
        assert_eq!(d1.q.data(), d2.q.data());
    }

    #[test]
    fn sign_convention_pins_dominant_entry_positive() {
        for seed in 0..10 {
            let dec = svd(&random_matrix(6, 4, seed)).unwrap();
            for col in 0..4 {
                let column = dec.p.col(col);
                let dominant = column
                    .iter()
                    .cloned()
                    .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
                assert!(dominant >= 0.0);
            }
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut a = DenseMatrix::zeros(2, 2);
        a.data_mut()[3] = f64::INFINITY;
        assert!(matches!(svd(&a), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn pseudoinverse_of_identity_and_singular_diagonal() {
        let pinv = pseudoinverse(&DenseMatrix::identity(4), None).unwrap();
        assert!(pinv.sub(&DenseMatrix::identity(4)).unwrap().max_abs() < 1e-12);

        // diag(2, 0) inverts the nonzero entry and zeroes the rest.
        let a = DenseMatrix::new(2, 2, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let pinv = pseudoinverse(&a, None).unwrap();
        let expected = DenseMatrix::new(2, 2, vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        assert!(pinv.sub(&expected).unwrap().max_abs() < 1e-12);
    }

    /// Gauss-Jordan inverse used as an independent oracle for small
    /// well-conditioned systems.
    fn invert(a: &DenseMatrix) -> DenseMatrix {
        let n = a.rows();
        let mut aug = DenseMatrix::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug.set(i, j, a.get(i, j));
            }
            aug.set(i, n + i, 1.0);
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| {
                    aug.get(x, col)
                        .abs()
                        .partial_cmp(&aug.get(y, col).abs())
                        .unwrap()
                })
                .unwrap();
            if pivot != col {
                for j in 0..2 * n {
                    let tmp = aug.get(col, j);
                    aug.set(col, j, aug.get(pivot, j));
                    aug.set(pivot, j, tmp);
                }
            }
            let p = aug.get(col, col);
            assert!(p.abs() > 1e-12, "oracle matrix singular");
            for j in 0..2 * n {
                aug.set(col, j, aug.get(col, j) / p);
            }
            for i in 0..n {
                if i == col {
                    continue;
                }
                let f = aug.get(i, col);
                for j in 0..2 * n {
                    aug.set(i, j, aug.get(i, j) - f * aug.get(col, j));
                }
            }
        }
        DenseMatrix::from_fn(n, n, |i, j| aug.get(i, n + j))
    }

    #[test]
    fn pseudoinverse_matches_normal_equations_on_full_column_rank() {
        // For full column rank, pinv(A) == inv(A^T A) A^T.
        let a = random_matrix(6, 3, 3);
        let pinv = pseudoinverse(&a, None).unwrap();
        let gram_inv = invert(&a.transpose().matmul(&a).unwrap());
        let oracle = gram_inv.matmul(&a.transpose()).unwrap();
        assert!(pinv.sub(&oracle).unwrap().max_abs() < 1e-8);
        // And pinv(A) * A is the identity on the small side.
        let prod = pinv.matmul(&a).unwrap();
        assert!(prod.sub(&DenseMatrix::identity(3)).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn pseudoinverse_satisfies_penrose_identities() {
        for seed in [1u64, 2, 3] {
            let a = random_matrix(5, 4, seed);
            let pinv = pseudoinverse(&a, None).unwrap();
            let apa = a.matmul(&pinv).unwrap().matmul(&a).unwrap();
            assert!(apa.sub(&a).unwrap().max_abs() < 1e-9);
            let pap = pinv.matmul(&a).unwrap().matmul(&pinv).unwrap();
            assert!(pap.sub(&pinv).unwrap().max_abs() < 1e-9);
        }
    }

    #[test]
    fn norms_on_fixed_cases() {
        let zero = DenseMatrix::zeros(3, 2);
        assert_eq!(norm(&zero, NormKind::Spectral).unwrap(), 0.0);
        assert_eq!(norm(&zero, NormKind::Frobenius).unwrap(), 0.0);

        let a = DenseMatrix::new(2, 2, vec![3.0, 0.0, 0.0, 4.0]).unwrap();
        assert_relative_eq!(norm(&a, NormKind::Spectral).unwrap(), 4.0, max_relative = 1e-12);
        assert_relative_eq!(norm(&a, NormKind::Frobenius).unwrap(), 5.0, max_relative = 1e-12);
    }

    #[test]
    fn spectral_frobenius_sandwich_holds_on_random_matrices() {
        // ||A||_2 <= ||A||_F <= sqrt(k) ||A||_2 for every nonzero matrix.
        for seed in 0..20 {
            let a = random_matrix(7, 5, 100 + seed);
            let s = norm(&a, NormKind::Spectral).unwrap();
            let f = norm(&a, NormKind::Frobenius).unwrap();
            assert!(s <= f * (1.0 + 1e-12));
            assert!(f <= 5.0f64.sqrt() * s * (1.0 + 1e-12));
        }
    }
}
