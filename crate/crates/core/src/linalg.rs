//! Thin and truncated singular value decomposition.
//!
//! Tall inputs are first reduced with a Householder QR, then the square
//! triangular factor is diagonalized with one-sided (Hestenes) Jacobi
//! rotations. Wide inputs are handled through their transpose.
//!
//! Output is deterministic: singular values are sorted descending (stable on
//! ties) and each column of `U` has its largest-magnitude entry non-negative,
//! with the matching column of `V` flipped alongside. Factor matrices of
//! similar gradients in consecutive rounds therefore keep a consistent sign.

use crate::error::{QrrError, Result};
use crate::kernels::dot;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// `A ≈ U · diag(sigma) · Vᵀ` with `U: m×r`, `V: n×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult<T> {
    pub u: Tensor<T>,
    pub sigma: Vec<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U · diag(sigma) · Vᵀ`
    pub fn reconstruct(&self) -> Tensor<T> {
        reconstruct_usv(&self.u, &self.sigma, &self.v)
    }
}

pub(crate) fn reconstruct_usv<T: Scalar>(u: &Tensor<T>, sigma: &[T], v: &Tensor<T>) -> Tensor<T> {
    let (m, r) = (u.rows(), u.cols());
    let n = v.rows();
    let mut scaled = u.data().to_vec();
    for row in scaled.chunks_mut(r) {
        for (x, &s) in row.iter_mut().zip(sigma) {
            *x *= s;
        }
    }
    let mut out = vec![T::zero(); m * n];
    crate::kernels::gemm_nt(m, r, n, &scaled, v.data(), &mut out);
    Tensor::matrix(m, n, out).expect("consistent factor shapes")
}

/// Thin SVD with `r = min(m, n)`.
pub fn svd<T: Scalar>(a: &Tensor<T>) -> Result<SvdResult<T>> {
    if a.order() != 2 {
        return Err(QrrError::ShapeMismatch(format!(
            "svd needs a matrix, got {:?}",
            a.shape()
        )));
    }
    if !a.is_finite() {
        return Err(QrrError::NonFinite);
    }
    let (m, n) = (a.rows(), a.cols());
    let (mut u, sigma, mut v) = if m >= n {
        tall_svd(m, n, &to_col_major(a))?
    } else {
        // Aᵀ = U' Σ V'ᵀ  ⇒  A = V' Σ U'ᵀ
        let at = a.transpose()?;
        let (u_t, s, v_t) = tall_svd(n, m, &to_col_major(&at))?;
        (v_t, s, u_t)
    };
    let r = sigma.len();
    let (rows_u, rows_v) = (m, n);
    for j in 0..r {
        let col = &u[j * rows_u..(j + 1) * rows_u];
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < T::zero() {
            u[j * rows_u..(j + 1) * rows_u].iter_mut().for_each(|x| *x = -*x);
            v[j * rows_v..(j + 1) * rows_v].iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(SvdResult {
        u: from_col_major(rows_u, r, &u),
        sigma,
        v: from_col_major(rows_v, r, &v),
    })
}

/// Keeps the `nu` leading singular triplets.
pub fn truncated_svd<T: Scalar>(a: &Tensor<T>, nu: usize) -> Result<SvdResult<T>> {
    if a.order() != 2 {
        return Err(QrrError::ShapeMismatch(format!(
            "svd needs a matrix, got {:?}",
            a.shape()
        )));
    }
    let max_rank = a.rows().min(a.cols());
    if nu == 0 || nu > max_rank {
        return Err(QrrError::InvalidArgument(format!(
            "truncation rank {nu} outside 1..={max_rank}"
        )));
    }
    let full = svd(a)?;
    Ok(SvdResult {
        u: leading_columns(&full.u, nu),
        sigma: full.sigma[..nu].to_vec(),
        v: leading_columns(&full.v, nu),
    })
}

pub(crate) fn leading_columns<T: Scalar>(m: &Tensor<T>, k: usize) -> Tensor<T> {
    let (rows, cols) = (m.rows(), m.cols());
    let data = m.data().chunks(cols).flat_map(|row| row[..k].iter().copied()).collect();
    Tensor::matrix(rows, k, data).expect("k <= cols")
}

/// Leading `r` left singular vectors of `a` as an `m×r` matrix. When `r`
/// exceeds `min(m, n)` the basis is extended with orthonormal columns
/// spanning the complement.
pub fn leading_left_vectors<T: Scalar>(a: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let m = a.rows();
    if r == 0 || r > m {
        return Err(QrrError::InvalidArgument(format!(
            "cannot take {r} left vectors of a {m}-row matrix"
        )));
    }
    let s = svd(a)?;
    let k = s.rank();
    if r <= k {
        return Ok(leading_columns(&s.u, r));
    }
    let mut cols = vec![T::zero(); m * m];
    for j in 0..k {
        for i in 0..m {
            cols[j * m + i] = s.u.get(&[i, j]);
        }
    }
    let missing: Vec<usize> = (k..m).collect();
    complete_basis(m, &mut cols, &missing);
    Ok(from_col_major(m, r, &cols[..m * r]))
}

fn to_col_major<T: Scalar>(a: &Tensor<T>) -> Vec<T> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    out
}

fn from_col_major<T: Scalar>(rows: usize, cols: usize, data: &[T]) -> Tensor<T> {
    Tensor::from_fn(&[rows, cols], |k| data[(k % cols) * rows + k / cols])
}

/// Returns column-major `(U: m×n, sigma, V: n×n)` for `m ≥ n`.
fn tall_svd<T: Scalar>(m: usize, n: usize, a: &[T]) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (reflectors, r, perm) = householder_qr(m, n, a);
    // A·P = Q·R and Jacobi on Rᵀ = X Σ Yᵀ give A = (Q·Y) Σ (P·X)ᵀ.
    let mut rt = vec![T::zero(); n * n];
    for j in 0..n {
        for i in 0..n {
            rt[i * n + j] = r[j * n + i];
        }
    }
    let (x, sigma, mut ur) = jacobi(n, rt)?;
    let mut v = vec![T::zero(); n * n];
    for j in 0..n {
        for (i, &p) in perm.iter().enumerate() {
            v[j * n + p] = x[j * n + i];
        }
    }
    // U = Q · U_R, with Q = H₀ H₁ … H_{n-1} applied to [U_R; 0].
    let mut u = vec![T::zero(); m * n];
    for j in 0..n {
        u[j * m..j * m + n].copy_from_slice(&ur[j * n..(j + 1) * n]);
    }
    ur.clear();
    for (k, h) in reflectors.iter().enumerate().rev() {
        let Some(h) = h else { continue };
        for j in 0..n {
            let col = &mut u[j * m + k..(j + 1) * m];
            let two_d = T::of(2.0) * dot(h, col);
            for (c, &hv) in col.iter_mut().zip(h) {
                *c -= two_d * hv;
            }
        }
    }
    Ok((u, sigma, v))
}

/// Householder QR with column pivoting of a column-major `m×n` matrix.
/// Returns the unit reflectors (acting on rows `k..m`), the `n×n`
/// upper-triangular factor (column-major) and the column order `perm`, so
/// that column `i` of `A·P` is column `perm[i]` of `A`.
#[allow(clippy::type_complexity)]
fn householder_qr<T: Scalar>(m: usize, n: usize, a: &[T]) -> (Vec<Option<Vec<T>>>, Vec<T>, Vec<usize>) {
    let mut w = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut reflectors = Vec::with_capacity(n);
    for k in 0..n {
        let mut best = k;
        let mut best_norm = T::zero();
        for j in k..n {
            let col = &w[j * m + k..(j + 1) * m];
            let norm = dot(col, col);
            if norm > best_norm {
                best = j;
                best_norm = norm;
            }
        }
        if best != k {
            let (head, tail) = w.split_at_mut(best * m);
            head[k * m..(k + 1) * m].swap_with_slice(&mut tail[..m]);
            perm.swap(k, best);
        }
        let x = &w[k * m + k..(k + 1) * m];
        let norm = dot(x, x).sqrt();
        if norm == T::zero() {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] > T::zero() { -norm } else { norm };
        let mut h = x.to_vec();
        h[0] -= alpha;
        let h_norm = dot(&h, &h).sqrt();
        if h_norm == T::zero() {
            reflectors.push(None);
            continue;
        }
        h.iter_mut().for_each(|v| *v /= h_norm);
        for j in k..n {
            let col = &mut w[j * m + k..(j + 1) * m];
            let two_d = T::of(2.0) * dot(&h, col);
            for (c, &hv) in col.iter_mut().zip(&h) {
                *c -= two_d * hv;
            }
        }
        reflectors.push(Some(h));
    }
    let mut r = vec![T::zero(); n * n];
    for j in 0..n {
        for i in 0..=j {
            r[j * n + i] = w[j * m + i];
        }
    }
    (reflectors, r, perm)
}

/// One-sided Jacobi on a square column-major matrix. Returns column-major
/// `(U, sigma, V)`, sorted by descending singular value.
fn jacobi<T: Scalar>(n: usize, mut g: Vec<T>) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let tol = T::of(1e-12).max(T::epsilon() * T::of(16.0));
    // columns below the numerical-rank cutoff are left alone; their singular
    // values are below n·ε·σ_max and their left vectors are rebuilt afterwards
    let rank_eps = T::epsilon() * T::of(n as f64);
    let mut sq_norms = vec![T::zero(); n];

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        for (j, s) in sq_norms.iter_mut().enumerate() {
            *s = dot(&g[j * n..(j + 1) * n], &g[j * n..(j + 1) * n]);
        }
        let largest = sq_norms.iter().fold(T::zero(), |m, &x| m.max(x));
        let negligible = largest * rank_eps * rank_eps;
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let (alpha, beta) = (sq_norms[i], sq_norms[j]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let (gi, gj) = col_pair(&mut g, n, i, j);
                let gamma = dot(gi, gj);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(gi, gj, c, s);
                sq_norms[i] = alpha - t * gamma;
                sq_norms[j] = beta + t * gamma;
                let (vi, vj) = col_pair(&mut v, n, i, j);
                rotate(vi, vj, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(QrrError::NoConvergence(MAX_SWEEPS));
    }

    let norms: Vec<T> = (0..n)
        .map(|j| dot(&g[j * n..(j + 1) * n], &g[j * n..(j + 1) * n]).sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));

    let sigma_max = norms[order[0]];
    let cutoff = sigma_max * T::epsilon() * T::of(n as f64);
    let mut u = vec![T::zero(); n * n];
    let mut v_sorted = vec![T::zero(); n * n];
    let mut sigma = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        v_sorted[dst * n..(dst + 1) * n].copy_from_slice(&v[src * n..(src + 1) * n]);
        if s > cutoff && s > T::zero() {
            for (o, &x) in u[dst * n..(dst + 1) * n].iter_mut().zip(&g[src * n..(src + 1) * n]) {
                *o = x / s;
            }
        } else {
            deficient.push(dst);
        }
    }
    complete_basis(n, &mut u, &deficient);
    Ok((u, sigma, v_sorted))
}

fn col_pair<T>(m: &mut [T], n: usize, i: usize, j: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(i < j);
    let (head, tail) = m.split_at_mut(j * n);
    (&mut head[i * n..(i + 1) * n], &mut tail[..n])
}

fn rotate<T: Scalar>(x: &mut [T], y: &mut [T], c: T, s: T) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the listed columns with unit vectors orthogonal to every other
/// filled column. Each new column starts from the standard basis vector with
/// the largest residual after projecting out the filled columns.
fn complete_basis<T: Scalar>(n: usize, u: &mut [T], missing: &[usize]) {
    let mut filled: Vec<usize> = (0..n).filter(|j| !missing.contains(j)).collect();
    // captured[k] = Σ_f u_f[k]², so ‖(I − P) e_k‖² = 1 − captured[k]
    let mut captured = vec![T::zero(); n];
    for &f in &filled {
        for (c, &x) in captured.iter_mut().zip(&u[f * n..(f + 1) * n]) {
            *c += x * x;
        }
    }
    for &target in missing {
        let mut e = 0;
        for k in 1..n {
            if captured[k] < captured[e] {
                e = k;
            }
        }
        let mut cand = vec![T::zero(); n];
        cand[e] = T::one();
        for _ in 0..2 {
            for &f in &filled {
                let col = &u[f * n..(f + 1) * n];
                let p = dot(col, &cand);
                for (c, &q) in cand.iter_mut().zip(col) {
                    *c -= p * q;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        for ((o, c), cap) in u[target * n..(target + 1) * n]
            .iter_mut()
            .zip(cand)
            .zip(captured.iter_mut())
        {
            *o = c / norm;
            *cap += *o * *o;
        }
        filled.push(target);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[m, n], |_| rng.random_range(-1.0..1.0))
    }

    fn assert_orthonormal_columns(q: &Tensor<f64>) {
        let qtq = q.transpose().unwrap().matmul(q).unwrap();
        let id = Tensor::identity(q.cols());
        assert!(qtq.sub(&id).unwrap().max_norm() < 1e-10, "QᵀQ != I");
    }

    fn check_invariants(a: &Tensor<f64>, s: &SvdResult<f64>) {
        assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.sigma.iter().all(|&x| x >= 0.0));
        assert_orthonormal_columns(&s.u);
        assert_orthonormal_columns(&s.v);
        let err = a.sub(&s.reconstruct()).unwrap().frobenius_norm();
        assert!(
            err <= 1e-9 * a.frobenius_norm().max(1e-300),
            "reconstruction error {err}"
        );
    }

    #[test]
    fn diagonal() {
        let a = Tensor::<f64>::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let s = svd(&a).unwrap();
        assert_eq!(s.sigma, vec![3.0, 1.0]);
        for k in 0..2 {
            assert_eq!(s.u.get(&[k, k]).abs(), 1.0);
            assert_eq!(s.v.get(&[k, k]).abs(), 1.0);
        }
    }

    #[test]
    fn rank_one() {
        let u = [2.0 / 3.0_f64.sqrt(), 2.0 / 3.0_f64.sqrt(), -2.0 / 3.0_f64.sqrt()];
        let v = [0.6, 0.8];
        let a = Tensor::from_fn(&[3, 2], |k| u[k / 2] * v[k % 2]);
        let s = svd(&a).unwrap();
        assert!((s.sigma[0] - 2.0).abs() < 1e-12);
        assert!(s.sigma[1].abs() < 1e-12);
        check_invariants(&a, &s);
    }

    #[test]
    fn av_equals_sigma_u() {
        let a = random(5, 3, 42);
        let s = svd(&a).unwrap();
        check_invariants(&a, &s);
        for i in 0..3 {
            let vi = Tensor::from_fn(&[3, 1], |k| s.v.get(&[k, i]));
            let av = a.matmul(&vi).unwrap();
            for r in 0..5 {
                assert!((av.data()[r] - s.sigma[i] * s.u.get(&[r, i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wide_and_square_inputs() {
        for (m, n, seed) in [(3, 7, 1), (6, 6, 2), (1, 5, 3), (5, 1, 4), (1, 1, 5), (20, 64, 6)] {
            let a = random(m, n, seed);
            let s = svd(&a).unwrap();
            assert_eq!(s.u.shape(), &[m, m.min(n)]);
            assert_eq!(s.v.shape(), &[n, m.min(n)]);
            check_invariants(&a, &s);
        }
    }

    #[test]
    fn zero_and_rank_deficient() {
        let z = Tensor::<f64>::zeros(&[4, 3]);
        let s = svd(&z).unwrap();
        assert_eq!(s.sigma, vec![0.0; 3]);
        assert_orthonormal_columns(&s.u);
        assert_orthonormal_columns(&s.v);

        // two identical columns
        let b = random(6, 2, 9);
        let a = Tensor::from_fn(&[6, 3], |k| b.data()[(k / 3) * 2 + (k % 3).min(1)]);
        let s = svd(&a).unwrap();
        assert!(s.sigma[2] < 1e-12);
        check_invariants(&a, &s);
    }

    #[test]
    fn sign_convention() {
        for seed in 0..10 {
            let s = svd(&random(7, 4, seed)).unwrap();
            for j in 0..4 {
                let col: Vec<f64> = (0..7).map(|i| s.u.get(&[i, j])).collect();
                let big = col
                    .iter()
                    .copied()
                    .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
                assert!(big >= 0.0);
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = random(3, 3, 0);
        a.data_mut()[4] = f64::NAN;
        assert_eq!(svd(&a), Err(QrrError::NonFinite));
    }

    #[test]
    fn truncated_cases() {
        let a = Tensor::from_fn(&[3, 3], |k| if k % 4 == 0 { 3.0 - (k / 4) as f64 } else { 0.0 });
        let t = truncated_svd(&a, 2).unwrap();
        let err2 = a.sub(&t.reconstruct()).unwrap().frobenius_norm().powi(2);
        assert!((err2 - 1.0).abs() < 1e-12);

        let a = random(4, 6, 3);
        let t = truncated_svd(&a, 4).unwrap();
        assert!(a.sub(&t.reconstruct()).unwrap().frobenius_norm() < 1e-9);

        assert!(truncated_svd(&a, 0).is_err());
        assert!(truncated_svd(&a, 5).is_err());
    }

    #[test]
    fn truncation_error_is_tail_energy() {
        let a = random(8, 6, 17);
        let full = svd(&a).unwrap();
        let t = truncated_svd(&a, 3).unwrap();
        let err2 = a.sub(&t.reconstruct()).unwrap().frobenius_norm().powi(2);
        let tail: f64 = full.sigma[3..].iter().map(|s| s * s).sum();
        assert!((err2 - tail).abs() <= 1e-8 * tail);

        let mut prev = f64::INFINITY;
        for nu in 1..=6 {
            let e = a
                .sub(&truncated_svd(&a, nu).unwrap().reconstruct())
                .unwrap()
                .frobenius_norm();
            assert!(e <= prev + 1e-12);
            prev = e;
        }
    }

    #[test]
    fn deterministic() {
        let a = random(30, 12, 5);
        assert_eq!(svd(&a).unwrap(), svd(&a).unwrap());
    }

    #[test]
    fn singular_values_match_nalgebra() {
        for (m, n, seed) in [(10, 4, 1), (4, 10, 2), (33, 17, 3)] {
            let a = random(m, n, seed);
            let ours = svd(&a).unwrap().sigma;
            let na = nalgebra::DMatrix::from_row_slice(m, n, a.data());
            let mut theirs: Vec<f64> = na.singular_values().iter().copied().collect();
            theirs.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (x, y) in ours.iter().zip(&theirs) {
                assert!((x - y).abs() < 1e-10 * theirs[0]);
            }
        }
    }

    #[test]
    fn single_precision() {
        let a = Tensor::<f32>::from_fn(&[6, 4], |k| ((k * 7 % 11) as f32 - 5.0) / 3.0);
        let s = svd(&a).unwrap();
        let err = a.sub(&s.reconstruct()).unwrap().frobenius_norm();
        assert!(err < 1e-5 * a.frobenius_norm());
    }
}
