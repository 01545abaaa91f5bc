//! Small dense linear algebra: cyclic Jacobi eigendecomposition for symmetric
//! matrices and a one-sided Jacobi SVD.
//!
//! Everything here targets matrices with at most a few dozen rows, where
//! Jacobi methods are accurate, deterministic and simple. Eigenvectors are
//! sign-normalized so that their first non-negligible coordinate is
//! positive; this makes every downstream trace reproducible bit for bit.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::rng::Rng;

const MAX_SWEEPS: usize = 100;
const SIGN_TOL: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn min(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i).into_owned()
    }
}

/// Cyclic Jacobi eigendecomposition of the symmetric part of `a`.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(invalid(format!(
            "eigendecomposition needs a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(invalid("matrix has non-finite entries"));
    }
    let mut m = (a + a.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum();
        if off <= f64::EPSILON * f64::EPSILON * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the Jacobi output order for exact ties.
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let values = DVector::from_iterator(n, order.iter().map(|&i| m[(i, i)]));
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut e = v.column(i).into_owned();
        normalize_sign(&mut e);
        vectors.set_column(col, &e);
    }
    Ok(SymEigen { values, vectors })
}

/// Flips `v` so its first coordinate with magnitude above `1e-12` is positive.
pub fn normalize_sign(v: &mut DVector<f64>) {
    if let Some(first) = v.iter().copied().find(|x| x.abs() > SIGN_TOL) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Thin singular value decomposition `a = u * diag(sigma) * v^T` of a
/// `d x k` matrix with `k >= d`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// `d x d` orthogonal.
    pub u: DMatrix<f64>,
    /// Descending, length `d`.
    pub sigma: DVector<f64>,
    /// `k x d` with orthonormal columns.
    pub v: DMatrix<f64>,
}

/// One-sided (Hestenes) Jacobi SVD, applied to the columns of `a^T`.
///
/// Columns of `v` whose singular value vanishes are filled in by orthonormal
/// completion, so `v` always has orthonormal columns.
pub fn thin_svd(a: &DMatrix<f64>) -> Result<ThinSvd> {
    let (d, k) = a.shape();
    if d == 0 || k < d {
        return Err(invalid(format!("thin SVD needs k >= d >= 1, got {d}x{k}")));
    }
    let mut b = a.transpose(); // k x d
    let mut w = DMatrix::<f64>::identity(d, d);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in (p + 1)..d {
                let alpha = b.column(p).norm_squared();
                let beta = b.column(q).norm_squared();
                let gamma = b.column(p).dot(&b.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..k {
                    let bp = b[(r, p)];
                    let bq = b[(r, q)];
                    b[(r, p)] = c * bp - s * bq;
                    b[(r, q)] = s * bp + c * bq;
                }
                for r in 0..d {
                    let wp = w[(r, p)];
                    let wq = w[(r, q)];
                    w[(r, p)] = c * wp - s * wq;
                    w[(r, q)] = s * wp + c * wq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..d).map(|i| b.column(i).norm()).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let scale = norms.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tol = scale * (k as f64) * f64::EPSILON;

    let mut u = DMatrix::<f64>::zeros(d, d);
    let mut sigma = DVector::<f64>::zeros(d);
    let mut v = DMatrix::<f64>::zeros(k, d);
    let mut rank = 0;
    for (col, &i) in order.iter().enumerate() {
        sigma[col] = norms[i];
        u.set_column(col, &w.column(i));
        if norms[i] > tol {
            v.set_column(col, &(b.column(i) / norms[i]));
            rank += 1;
        }
    }
    if rank < d {
        let basis = v.columns(0, rank).into_owned();
        let extra = orthonormal_completion(&basis, d - rank);
        for (offset, col) in (rank..d).enumerate() {
            v.set_column(col, &extra.column(offset));
        }
    }
    Ok(ThinSvd { u, sigma, v })
}

/// Returns `count` unit columns orthogonal to the (orthonormal) columns of
/// `basis`, built by Gram-Schmidt over the standard basis in index order.
pub fn orthonormal_completion(basis: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let n = basis.nrows();
    let mut found: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    let mut out = Vec::with_capacity(count);
    for e in 0..n {
        if out.len() == count {
            break;
        }
        let mut cand = DVector::<f64>::zeros(n);
        cand[e] = 1.0;
        // Two passes of modified Gram-Schmidt.
        for _ in 0..2 {
            for q in &found {
                let proj = q.dot(&cand);
                cand.axpy(-proj, q, 1.0);
            }
        }
        let norm = cand.norm();
        if norm > 1e-8 {
            cand /= norm;
            found.push(cand.clone());
            out.push(cand);
        }
    }
    assert_eq!(out.len(), count, "orthonormal completion ran out of directions");
    DMatrix::from_columns(&out)
}

/// Random `n x n` orthogonal matrix (QR of a Gaussian matrix with the sign
/// convention that makes the distribution Haar).
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    q
}

/// Random symmetric matrix with unit Frobenius norm.
pub fn random_unit_symmetric(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let s = (&g + g.transpose()) * 0.5;
    let norm = s.norm();
    s / norm
}

/// Largest absolute eigenvalue of a symmetric matrix, with its eigenvector.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let eig = sym_eigen(a)?;
    let (top, bottom) = (eig.max(), eig.min());
    if top.abs() >= bottom.abs() {
        Ok((top.abs(), eig.vector(0)))
    } else {
        Ok((bottom.abs(), eig.vector(eig.values.len() - 1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn random_matrix(r: usize, c: usize, rng: &mut Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn jacobi_matches_nalgebra() {
        let mut rng = seeded(3);
        for n in 1..8 {
            let g = random_matrix(n, n, &mut rng);
            let s = &g + g.transpose();
            let ours = sym_eigen(&s).unwrap();
            let mut reference: Vec<f64> = s.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
            reference.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for (a, b) in ours.values.iter().zip(&reference) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-11);
            }
            let recon = &ours.vectors * DMatrix::from_diagonal(&ours.values) * ours.vectors.transpose();
            assert_abs_diff_eq!((recon - &s).norm(), 0.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn eigenvector_sign_convention() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let eig = sym_eigen(&a).unwrap();
        assert_eq!(eig.values.as_slice(), &[2.0, 1.0]);
        assert_eq!(eig.vector(0).as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn identity_keeps_jacobi_order() {
        let eig = sym_eigen(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(eig.vectors, DMatrix::identity(3, 3));
    }

    #[test]
    fn svd_reconstructs_and_matches_reference() {
        let mut rng = seeded(5);
        for (d, k) in [(1, 1), (2, 3), (3, 3), (4, 7)] {
            let a = random_matrix(d, k, &mut rng);
            let svd = thin_svd(&a).unwrap();
            let recon = &svd.u * DMatrix::from_diagonal(&svd.sigma) * svd.v.transpose();
            assert_abs_diff_eq!((recon - &a).norm(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!((svd.v.transpose() * &svd.v - DMatrix::identity(d, d)).norm(), 0.0, epsilon = 1e-13);
            let mut reference: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
            reference.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for (x, y) in svd.sigma.iter().zip(&reference) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn svd_completes_rank_deficient_factor() {
        // Two proportional columns plus a zero column: rank 1 in d = 2.
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 1.0, 2.0, 0.0]);
        let svd = thin_svd(&a).unwrap();
        assert_abs_diff_eq!(svd.sigma[1], 0.0, epsilon = 1e-12);
        let vtv = svd.v.transpose() * &svd.v;
        assert_abs_diff_eq!((vtv - DMatrix::identity(2, 2)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn completion_is_orthonormal() {
        let mut rng = seeded(9);
        let q = random_orthogonal(5, &mut rng);
        let basis = q.columns(0, 2).into_owned();
        let extra = orthonormal_completion(&basis, 3);
        let full = DMatrix::from_columns(&[basis.column(0), basis.column(1), extra.column(0), extra.column(1), extra.column(2)]);
        assert_abs_diff_eq!((full.transpose() * &full - DMatrix::identity(5, 5)).norm(), 0.0, epsilon = 1e-12);
    }
}
