//! Thin SVD by one-sided (Hestenes) Jacobi rotations.

use super::{dot, DenseMatrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Singular values below this fraction of the largest are treated as zero
/// when taking square roots in [`truncate`].
pub const SIGMA_CLAMP: f64 = 1e-12;

/// `m = u · diag(sigma) · vᵀ` with `k = min(rows, cols)` columns in `u` and `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vᵀ` restricted to the leading `r` triplets.
    pub fn reconstruct(&self, r: usize) -> DenseMatrix {
        let r = r.min(self.sigma.len());
        let mut us = self.u.col_block(0..r);
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul_t_unchecked(&self.v.col_block(0..r))
    }

    /// `√(Σ_{i ≥ r} σᵢ²)`: the Frobenius error of the best rank-`r` approximation.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.sigma.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Thin singular value decomposition.
///
/// Singular values are returned in descending order. Each column of `u` is
/// sign-normalised so that its largest-magnitude entry is positive.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::shape("svd of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(Error::numerical("svd", "input contains non-finite entries"));
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        let mut out = SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// One-sided Jacobi on a matrix with `rows >= cols`. Columns of `m` are kept
/// as contiguous rows of `w` so rotations touch contiguous memory.
fn jacobi_tall(m: &DenseMatrix) -> Result<SvdResult> {
    let (rows, n) = m.shape();
    let mut w = m.transpose();
    let mut vt = DenseMatrix::identity(n);
    let tol = f64::EPSILON * (rows as f64).sqrt().max(1.0);
    // Columns this small relative to the whole matrix are rounding noise;
    // rotating them against each other never settles.
    let negligible = 1e-28 * m.data().iter().map(|x| x * x).sum::<f64>();

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(w.row(i), w.row(i));
                let beta = dot(w.row(j), w.row(j));
                let gamma = dot(w.row(i), w.row(j));
                if alpha <= negligible || beta <= negligible || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, i, j, c, s);
                rotate_rows(&mut vt, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical(
            "svd",
            format!("one-sided Jacobi did not converge after {sweeps} sweeps"),
        ));
    }

    let mut sigma: Vec<f64> = (0..n).map(|i| dot(w.row(i), w.row(i)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    sigma = order.iter().map(|&i| sigma[i]).collect();

    let sigma_max = sigma[0];
    let mut ut = DenseMatrix::zeros(n, rows);
    let mut v_rows = DenseMatrix::zeros(n, n);
    let mut needs_completion = Vec::new();
    for (k, &src) in order.iter().enumerate() {
        v_rows.row_mut(k).copy_from_slice(vt.row(src));
        let s = sigma[k];
        if s > 0.0 && s > sigma_max * 1e-14 {
            for (dst, &x) in ut.row_mut(k).iter_mut().zip(w.row(src)) {
                *dst = x / s;
            }
        } else {
            needs_completion.push(k);
        }
    }
    complete_orthonormal(&mut ut, &needs_completion);

    let mut out = SvdResult {
        u: ut.transpose(),
        sigma,
        v: v_rows.transpose(),
    };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate_rows(m: &mut DenseMatrix, i: usize, j: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.data_mut();
    let (head, tail) = data.split_at_mut(j * cols);
    let ri = &mut head[i * cols..(i + 1) * cols];
    let rj = &mut tail[..cols];
    for (a, b) in ri.iter_mut().zip(rj.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the listed rows of `basis` (row = basis vector) with unit vectors
/// orthogonal to every other row, by Gram–Schmidt over the canonical basis.
fn complete_orthonormal(basis: &mut DenseMatrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = basis.cols();
    let mut filled: Vec<usize> = (0..basis.rows()).filter(|r| !missing.contains(r)).collect();
    for &slot in missing {
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = 0.0;
        for e in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[e] = 1.0;
            for _ in 0..2 {
                for &f in &filled {
                    let proj = dot(&cand, basis.row(f));
                    for (c, &b) in cand.iter_mut().zip(basis.row(f)) {
                        *c -= proj * b;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > best_norm {
                best_norm = norm;
                best = Some(cand);
                if norm > 0.7 {
                    break;
                }
            }
        }
        let cand = best.expect("basis completion requires spare dimensions");
        for (dst, c) in basis.row_mut(slot).iter_mut().zip(cand) {
            *dst = c / best_norm;
        }
        filled.push(slot);
    }
}

fn fix_signs(s: &mut SvdResult) {
    let k = s.sigma.len();
    for c in 0..k {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for r in 0..s.u.rows() {
            let x = s.u.get(r, c);
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for r in 0..s.u.rows() {
                s.u.set(r, c, -s.u.get(r, c));
            }
            for r in 0..s.v.rows() {
                s.v.set(r, c, -s.v.get(r, c));
            }
        }
    }
}

/// Rank-`r` spectral pair `(U_r Σ_r^{1/2}, Σ_r^{1/2} V_rᵀ)`.
///
/// The product of the pair is the Frobenius-optimal rank-`r` approximation of
/// the decomposed matrix.
pub fn truncate(s: &SvdResult, r: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    let k = s.sigma.len();
    if r == 0 || r > k {
        return Err(Error::Rank(format!("truncation rank {r} outside 1..={k}")));
    }
    let floor = s.sigma[0] * SIGMA_CLAMP;
    let roots: Vec<f64> = s.sigma[..r]
        .iter()
        .map(|&x| if x < floor { 0.0 } else { x.sqrt() })
        .collect();
    let mut left = s.u.col_block(0..r);
    for i in 0..left.rows() {
        for (x, rt) in left.row_mut(i).iter_mut().zip(&roots) {
            *x *= rt;
        }
    }
    let mut right = s.v.col_block(0..r).transpose();
    for (i, rt) in roots.iter().enumerate() {
        for x in right.row_mut(i) {
            *x *= rt;
        }
    }
    Ok((left, right))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormality_error(m: &DenseMatrix) -> f64 {
        let g = m.t_matmul(m).unwrap();
        g.sub(&DenseMatrix::identity(m.cols())).unwrap().max_abs()
    }

    fn check_invariants(m: &DenseMatrix) {
        let s = svd(m).unwrap();
        let k = m.rows().min(m.cols());
        assert_eq!(s.sigma.len(), k);
        assert_eq!(s.u.shape(), (m.rows(), k));
        assert_eq!(s.v.shape(), (m.cols(), k));
        assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.sigma.iter().all(|&x| x >= 0.0));
        assert!(orthonormality_error(&s.u) < 1e-8, "u not orthonormal");
        assert!(orthonormality_error(&s.v) < 1e-8, "v not orthonormal");
        let rec = s.reconstruct(k);
        let rel = rec.sub(m).unwrap().fro_norm() / m.fro_norm().max(1e-300);
        assert!(rel < 1e-10, "reconstruction error {rel}");
    }

    /// Eigenvalues of a symmetric 3×3 matrix from its characteristic cubic
    /// (trigonometric solution), descending.
    fn symmetric_cubic_eigenvalues(a: &DenseMatrix) -> [f64; 3] {
        let p1 = a.get(0, 1).powi(2) + a.get(0, 2).powi(2) + a.get(1, 2).powi(2);
        let q = (a.get(0, 0) + a.get(1, 1) + a.get(2, 2)) / 3.0;
        let p2 = (a.get(0, 0) - q).powi(2)
            + (a.get(1, 1) - q).powi(2)
            + (a.get(2, 2) - q).powi(2)
            + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = DenseMatrix::from_fn(3, 3, |i, j| {
            (a.get(i, j) - if i == j { q } else { 0.0 }) / p
        });
        let det_b = b.get(0, 0) * (b.get(1, 1) * b.get(2, 2) - b.get(1, 2) * b.get(2, 1))
            - b.get(0, 1) * (b.get(1, 0) * b.get(2, 2) - b.get(1, 2) * b.get(2, 0))
            + b.get(0, 2) * (b.get(1, 0) * b.get(2, 1) - b.get(1, 1) * b.get(2, 0));
        let r = (det_b / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let e2 = 3.0 * q - e1 - e3;
        [e1, e2, e3]
    }

    #[test]
    fn identity_singular_values() {
        let s = svd(&DenseMatrix::identity(2)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn rank_deficient_diagonal() {
        let m = DenseMatrix::from_rows(&[[3.0, 0.0], [0.0, 0.0]]).unwrap();
        let s = svd(&m).unwrap();
        assert_eq!(s.sigma, vec![3.0, 0.0]);
        check_invariants(&m);
    }

    #[test]
    fn squares_match_characteristic_polynomial() {
        for seed in 0..10 {
            let m = random(3, 3, 100 + seed);
            let s = svd(&m).unwrap();
            let gram = m.t_matmul(&m).unwrap();
            let eig = symmetric_cubic_eigenvalues(&gram);
            for (sv, e) in s.sigma.iter().zip(eig) {
                assert!((sv * sv - e).abs() < 1e-9, "{} vs {}", sv * sv, e);
            }
        }
    }

    #[test]
    fn wide_and_zero_matrices() {
        check_invariants(&random(3, 7, 5));
        check_invariants(&random(7, 3, 6));
        let s = svd(&DenseMatrix::zeros(4, 3)).unwrap();
        assert!(s.sigma.iter().all(|&x| x == 0.0));
        assert!(orthonormality_error(&s.u) < 1e-12);
    }

    #[test]
    fn sign_convention() {
        let s = svd(&random(5, 4, 8)).unwrap();
        for c in 0..4 {
            let col = s.u.column(c);
            let max = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(svd(&DenseMatrix::zeros(0, 3)).is_err());
        let mut m = DenseMatrix::zeros(2, 2);
        m.set(0, 0, f64::NAN);
        assert!(matches!(svd(&m), Err(Error::Numerical { .. })));
    }

    #[test]
    fn truncate_rank_one_exact() {
        let u = DenseMatrix::from_rows(&[[1.0], [2.0], [-1.0]]).unwrap();
        let v = DenseMatrix::from_rows(&[[0.5], [3.0]]).unwrap();
        let m = u.matmul_t(&v).unwrap();
        let (l, r) = truncate(&svd(&m).unwrap(), 1).unwrap();
        assert!(l.matmul(&r).unwrap().sub(&m).unwrap().fro_norm() <= 1e-12);
    }

    #[test]
    fn truncate_identity() {
        let m = DenseMatrix::identity(4);
        let (l, r) = truncate(&svd(&m).unwrap(), 2).unwrap();
        let err = l.matmul(&r).unwrap().sub(&m).unwrap().fro_norm();
        assert!((err - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn truncate_matches_tail_energy() {
        let m = random(6, 6, 42);
        let s = svd(&m).unwrap();
        let (l, r) = truncate(&s, 3).unwrap();
        let err = l.matmul(&r).unwrap().sub(&m).unwrap().fro_norm();
        let tail = (s.sigma[3].powi(2) + s.sigma[4].powi(2) + s.sigma[5].powi(2)).sqrt();
        assert!((err - tail).abs() < 1e-12);
    }

    #[test]
    fn truncate_rank_bounds() {
        let s = svd(&random(3, 3, 1)).unwrap();
        assert!(matches!(truncate(&s, 0), Err(Error::Rank(_))));
        assert!(matches!(truncate(&s, 4), Err(Error::Rank(_))));
    }

    #[test]
    fn eckart_young_beats_random_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let m = random(6, 5, 200 + trial);
            let s = svd(&m).unwrap();
            for r in 1..5 {
                let (l, rt) = truncate(&s, r).unwrap();
                let best = l.matmul(&rt).unwrap().sub(&m).unwrap().fro_norm();
                let a = DenseMatrix::from_fn(6, r, |_, _| rng.random_range(-1.0..1.0));
                let b = DenseMatrix::from_fn(r, 5, |_, _| rng.random_range(-1.0..1.0));
                let other = a.matmul(&b).unwrap().sub(&m).unwrap().fro_norm();
                assert!(best <= other + 1e-12);
                // truncating the truncation of a different matrix is still rank r
                let (l2, r2) = truncate(&svd(&m.scale(2.0).add(&a.matmul(&b).unwrap()).unwrap()).unwrap(), r).unwrap();
                let composed = l2.matmul(&r2).unwrap().scale(0.5).sub(&m).unwrap().fro_norm();
                assert!(best <= composed + 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn svd_invariants_hold(rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
            check_invariants(&random(rows, cols, seed));
        }

        #[test]
        fn truncation_error_non_increasing(rows in 2usize..8, cols in 2usize..8, seed in any::<u64>()) {
            let m = random(rows, cols, seed);
            let s = svd(&m).unwrap();
            let mut prev = f64::INFINITY;
            for r in 1..=rows.min(cols) {
                let (l, rt) = truncate(&s, r).unwrap();
                let err = l.matmul(&rt).unwrap().sub(&m).unwrap().fro_norm();
                prop_assert!(err <= prev + 1e-12);
                prev = err;
            }
        }
    }
}
