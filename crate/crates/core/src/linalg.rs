//! Dense and tridiagonal symmetric eigensolvers plus the small-matrix helpers
//! used by the thermostat.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenpairs of a real symmetric matrix, sorted by descending eigenvalue.
///
/// Eigenvectors are the columns of `vectors`, unit-normalized in the plain
/// Euclidean inner product.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// Maximum absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Cyclic Jacobi eigensolver with a fixed row-major sweep order.
///
/// The result is fully deterministic: rotations are applied in the same order
/// for identical input, eigenpairs are sorted by descending eigenvalue (ties
/// keep their diagonal order) and each eigenvector's largest-magnitude
/// component is made positive.
pub fn jacobi_eigen(m: &DMatrix<f64>, symmetry_tol: f64) -> Result<SymmetricEigen> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: m.ncols(),
        });
    }
    let dev = asymmetry(m);
    if dev > symmetry_tol {
        return Err(Error::NotSymmetric(dev));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix entry in eigensolve".into()));
    }

    // work on the symmetrized copy, row-major
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = f64::EPSILON * frob.max(f64::MIN_POSITIVE);

    let mut converged = n < 2;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                if t == 0.0 {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    let new_kp = akp - s * (akq + tau * akp);
                    let new_kq = akq + s * (akp - tau * akq);
                    a[k * n + p] = new_kp;
                    a[p * n + k] = new_kp;
                    a[k * n + q] = new_kq;
                    a[q * n + k] = new_kq;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = vkp - s * (vkq + tau * vkp);
                    v[k * n + q] = vkq + s * (vkp - tau * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence(format!(
            "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps (n = {n})"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut best = 0usize;
        for k in 0..n {
            if v[k * n + src].abs() > v[best * n + src].abs() + 1e-14 {
                best = k;
            }
        }
        let sign = if v[best * n + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(k, col)] = sign * v[k * n + src];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Number of eigenvalues of the symmetric tridiagonal matrix strictly below `x`.
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..diag.len() {
        let e2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        q = diag[i] - x - if i == 0 { 0.0 } else { e2 / q };
        if q == 0.0 {
            q = -f64::EPSILON * (diag[i].abs() + x.abs() + 1.0);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Solve `(T - shift I) y = b` for symmetric tridiagonal `T` with Gaussian
/// elimination and partial pivoting.
fn tridiagonal_shifted_solve(diag: &[f64], off: &[f64], shift: f64, b: &[f64]) -> Vec<f64> {
    let n = diag.len();
    // rows stored as three upper bands after pivoting: u0 (diag), u1, u2
    let mut u0 = vec![0.0; n];
    let mut u1 = vec![0.0; n];
    let mut u2 = vec![0.0; n];
    let mut rhs = b.to_vec();
    // current row under elimination
    let mut cur_d = diag[0] - shift;
    let mut cur_e = if n > 1 { off[0] } else { 0.0 };
    let mut cur_f = 0.0;
    let tiny = f64::EPSILON * diag.iter().fold(1.0_f64, |m, d| m.max(d.abs()));
    for i in 0..n {
        if i + 1 == n {
            u0[i] = if cur_d.abs() < tiny { tiny } else { cur_d };
            u1[i] = 0.0;
            u2[i] = 0.0;
            break;
        }
        let sub = off[i];
        let next_d = diag[i + 1] - shift;
        let next_e = if i + 2 < n { off[i + 1] } else { 0.0 };
        if cur_d.abs() >= sub.abs() {
            let piv = if cur_d.abs() < tiny { tiny } else { cur_d };
            let l = sub / piv;
            u0[i] = piv;
            u1[i] = cur_e;
            u2[i] = cur_f;
            rhs[i + 1] -= l * rhs[i];
            cur_d = next_d - l * cur_e;
            cur_e = next_e - l * cur_f;
            cur_f = 0.0;
        } else {
            // swap rows i and i+1
            let l = cur_d / sub;
            u0[i] = sub;
            u1[i] = next_d;
            u2[i] = next_e;
            rhs.swap(i, i + 1);
            let r = rhs[i];
            rhs[i + 1] -= l * r;
            let nd = cur_e - l * next_d;
            let ne = cur_f - l * next_e;
            cur_d = nd;
            cur_e = ne;
            cur_f = 0.0;
        }
    }
    let mut y = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = rhs[i];
        if i + 1 < n {
            s -= u1[i] * y[i + 1];
        }
        if i + 2 < n {
            s -= u2[i] * y[i + 2];
        }
        y[i] = s / u0[i];
    }
    y
}

/// Lowest `k` eigenpairs of a symmetric tridiagonal matrix.
///
/// Eigenvalues come from Sturm-sequence bisection, eigenvectors from inverse
/// iteration with re-orthogonalization inside near-degenerate clusters.
/// Returned vectors are unit-normalized in the Euclidean inner product.
pub fn tridiagonal_lowest(diag: &[f64], off: &[f64], k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = diag.len();
    if off.len() + 1 != n {
        return Err(Error::DimensionMismatch {
            expected: n.saturating_sub(1),
            got: off.len(),
        });
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("requested {k} eigenpairs of a {n}x{n} matrix")));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);

    let mut values = Vec::with_capacity(k);
    for idx in 0..k {
        let (mut a, mut b) = (lo, hi);
        let mut iter = 0;
        while b - a > 2.0 * f64::EPSILON * (a.abs().max(b.abs())) + f64::MIN_POSITIVE {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if sturm_count(diag, off, mid) > idx {
                b = mid;
            } else {
                a = mid;
            }
            iter += 1;
            if iter > 400 {
                return Err(Error::NoConvergence(format!("bisection for eigenvalue {idx}")));
            }
        }
        values.push(0.5 * (a + b));
    }

    let cluster_tol = 1e-3 * scale;
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (idx, &lambda) in values.iter().enumerate() {
        let mut v: Vec<f64> = (0..n)
            .map(|i| {
                let t = (i as f64 * 0.618_033_988_749_895 + 0.1 * idx as f64).fract();
                t - 0.4
            })
            .collect();
        let shift = lambda - 4.0 * f64::EPSILON * scale;
        for _ in 0..4 {
            let mut y = tridiagonal_shifted_solve(diag, off, shift, &v);
            for (j, prev) in vectors.iter().enumerate() {
                if (values[j] - lambda).abs() < cluster_tol {
                    let dot: f64 = prev.iter().zip(&y).map(|(a, b)| a * b).sum();
                    for (yi, pi) in y.iter_mut().zip(prev) {
                        *yi -= dot * pi;
                    }
                }
            }
            let norm = y.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::NoConvergence(format!("inverse iteration for eigenvector {idx}")));
            }
            v = y.into_iter().map(|x| x / norm).collect();
        }
        vectors.push(v);
    }
    Ok((values, vectors))
}

/// Matrix exponential (Padé approximant with scaling and squaring).
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().exp()
}

/// Symmetric square root factor `S` with `S Sᵀ = M` for a positive
/// semidefinite `M`. Eigenvalues in `[-clamp, 0)` are set to zero; anything
/// more negative is rejected.
pub fn psd_factor(m: &DMatrix<f64>, clamp: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let scale = m.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let eig = jacobi_eigen(m, 1e-10 * scale.max(1.0))?;
    let mut out = DMatrix::zeros(n, n);
    for (j, &lam) in eig.values.iter().enumerate() {
        let lam = if lam < 0.0 {
            if lam < -clamp * scale.max(1.0) {
                return Err(Error::NotPositiveSemidefinite(lam));
            }
            0.0
        } else {
            lam
        };
        let root = lam.sqrt();
        for i in 0..n {
            out[(i, j)] = eig.vectors[(i, j)] * root;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rng.gen_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    #[test]
    fn jacobi_half_identity() {
        let m = DMatrix::from_diagonal_element(2, 2, 0.5);
        let e = jacobi_eigen(&m, 1e-10).unwrap();
        assert_eq!(e.values, vec![0.5, 0.5]);
    }

    #[test]
    fn jacobi_diagonal_sorted() {
        let m = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.7]);
        let e = jacobi_eigen(&m, 1e-10).unwrap();
        assert_eq!(e.values, vec![0.7, 0.3]);
        assert_eq!(e.vectors[(1, 0)], 1.0);
        assert_eq!(e.vectors[(0, 1)], 1.0);
    }

    #[test]
    fn jacobi_residuals_random() {
        for seed in 0..5 {
            let m = random_symmetric(5, seed);
            let e = jacobi_eigen(&m, 1e-10).unwrap();
            for k in 0..5 {
                let v = e.vectors.column(k);
                let r = &m * v - v * e.values[k];
                assert!(r.norm() <= 1e-10, "residual {}", r.norm());
            }
            let vtv = e.vectors.transpose() * &e.vectors;
            assert!((vtv - DMatrix::identity(5, 5)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn jacobi_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(jacobi_eigen(&m, 1e-10), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn jacobi_is_deterministic() {
        let m = random_symmetric(12, 9);
        let a = jacobi_eigen(&m, 1e-10).unwrap();
        let b = jacobi_eigen(&m, 1e-10).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn tridiagonal_matches_dense() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let diag: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let off: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            dense[(i, i)] = diag[i];
            if i + 1 < n {
                dense[(i, i + 1)] = off[i];
                dense[(i + 1, i)] = off[i];
            }
        }
        let full = jacobi_eigen(&dense, 1e-12).unwrap();
        let (vals, vecs) = tridiagonal_lowest(&diag, &off, 6).unwrap();
        for k in 0..6 {
            let reference = full.values[n - 1 - k];
            assert!((vals[k] - reference).abs() < 1e-12, "{} vs {}", vals[k], reference);
            let v = nalgebra::DVector::from_vec(vecs[k].clone());
            let r = &dense * &v - &v * vals[k];
            assert!(r.norm() < 1e-10);
        }
        for a in 0..6 {
            for b in 0..6 {
                let d: f64 = vecs[a].iter().zip(&vecs[b]).map(|(x, y)| x * y).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn psd_factor_reconstructs() {
        let a = random_symmetric(4, 11);
        let m = &a * a.transpose();
        let s = psd_factor(&m, 1e-12).unwrap();
        assert!((&s * s.transpose() - &m).abs().max() < 1e-12);
        let zero = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(psd_factor(&zero, 1e-12).unwrap(), zero);
        let neg = DMatrix::from_diagonal_element(2, 2, -1.0);
        assert!(psd_factor(&neg, 1e-12).is_err());
    }

    #[test]
    fn expm_scalar_and_rotation() {
        let m = DMatrix::from_row_slice(1, 1, &[-0.3]);
        assert!((expm(&m)[(0, 0)] - (-0.3f64).exp()).abs() < 1e-15);
        let w = 0.7;
        let r = DMatrix::from_row_slice(2, 2, &[0.0, w, -w, 0.0]);
        let e = expm(&r);
        assert!((e[(0, 0)] - w.cos()).abs() < 1e-14);
        assert!((e[(0, 1)] - w.sin()).abs() < 1e-14);
    }
}
