//! Rank-reduced orthogonalization of feature matrices. The reduced SVD of
//! the features evaluated at reference points yields the matrix B with
//! `B_{jk} = v^k_j / σ_k`; at the reference points Q = F·B has orthonormal
//! columns under the empirical inner product those points define. At any
//! other evaluation point the columns are *not* orthonormal — they are the
//! same orthonormal *functions* evaluated elsewhere.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Singular values below `σ₁ · RANK_FLOOR` are discarded regardless of the
/// energy criterion; they would blow up 1/σ in B.
const RANK_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OrthoOptions {
    /// Smallest rank capturing at least this fraction of the squared
    /// Frobenius norm is kept.
    pub energy_fraction: f64,
    /// Optional hard cap on the rank.
    pub max_rank: Option<usize>,
}

impl Default for OrthoOptions {
    fn default() -> Self {
        Self { energy_fraction: 0.99, max_rank: None }
    }
}

/// Rank-reduced orthogonalization: B, the kept singular values, and the
/// content hash of the reference points that froze the inner product.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthoBasis {
    #[serde(with = "crate::serialize::mat2")]
    b: Array2<f64>,
    rank: usize,
    #[serde(with = "crate::serialize::vec1")]
    singular_values: Array1<f64>,
    energy_fraction: f64,
    reference_hash: Option<String>,
}

impl OrthoBasis {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn singular_values(&self) -> &Array1<f64> {
        &self.singular_values
    }

    pub fn energy_fraction(&self) -> f64 {
        self.energy_fraction
    }

    pub fn reference_hash(&self) -> Option<&str> {
        self.reference_hash.as_deref()
    }

    pub fn set_reference_hash(&mut self, hash: String) {
        self.reference_hash = Some(hash);
    }

    /// A rank-0 basis over `m` feature columns (zero feature matrix: no
    /// explainable directions, the penalty is absent).
    pub fn empty(m: usize) -> Self {
        Self {
            b: Array2::zeros((m, 0)),
            rank: 0,
            singular_values: Array1::zeros(0),
            energy_fraction: 1.0,
            reference_hash: None,
        }
    }

    /// Q = feature_values · B. Columns are orthonormal only when the rows
    /// are the reference points the basis was built from.
    pub fn apply(&self, feature_values: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if feature_values.ncols() != self.b.nrows() {
            return Err(Error::shape("OrthoBasis::apply", self.b.nrows(), feature_values.ncols()));
        }
        Ok(feature_values.dot(&self.b))
    }
}

/// Reduced SVD of a feature matrix evaluated at reference points, keeping
/// the smallest rank whose squared singular values reach `energy_fraction`
/// of ‖F‖²_F. Sign convention: the largest-magnitude entry of each right
/// singular vector is made positive, so serialized bases are byte-stable.
pub fn orthogonalize(features: &ArrayView2<f64>, opts: &OrthoOptions) -> Result<OrthoBasis> {
    if !(opts.energy_fraction > 0.0 && opts.energy_fraction <= 1.0) {
        return Err(Error::InvalidInput("energy_fraction must be in (0, 1]".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("feature matrix contains non-finite values".into()));
    }
    let total: f64 = features.iter().map(|v| v * v).sum();
    if total <= 0.0 {
        return Err(Error::Numerical("zero feature matrix: no positive singular values".into()));
    }
    let (n, m) = (features.nrows(), features.ncols());
    let na = nalgebra::DMatrix::from_row_iterator(n, m, features.iter().cloned());
    let svd = na.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut pairs: Vec<(f64, Vec<f64>)> = svd
        .singular_values
        .iter()
        .enumerate()
        .map(|(k, s)| (*s, (0..m).map(|j| v_t[(k, j)]).collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    finish_basis(pairs, total, m, opts)
}

fn finish_basis(
    pairs: Vec<(f64, Vec<f64>)>,
    total: f64,
    m: usize,
    opts: &OrthoOptions,
) -> Result<OrthoBasis> {
    let sigma1 = pairs.first().map(|p| p.0).unwrap_or(0.0);
    if sigma1 <= 0.0 {
        return Err(Error::Numerical("zero feature matrix: no positive singular values".into()));
    }
    let target = opts.energy_fraction * total;
    let mut cum = 0.0;
    let mut rank = 0;
    for (s, _) in &pairs {
        if *s < RANK_FLOOR * sigma1 {
            break;
        }
        cum += s * s;
        rank += 1;
        if cum >= target {
            break;
        }
    }
    if let Some(cap) = opts.max_rank {
        rank = rank.min(cap);
    }
    if rank == 0 {
        return Err(Error::Numerical("zero feature matrix: no positive singular values".into()));
    }
    let mut b = Array2::zeros((m, rank));
    let mut sigmas = Array1::zeros(rank);
    for k in 0..rank {
        let (s, v) = &pairs[k];
        // Sign fix: largest-magnitude entry of v made positive.
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(_, val)| *val)
            .unwrap_or(1.0);
        let flip = if lead < 0.0 { -1.0 } else { 1.0 };
        for j in 0..m {
            b[(j, k)] = flip * v[j] / s;
        }
        sigmas[k] = *s;
    }
    Ok(OrthoBasis {
        b,
        rank,
        singular_values: sigmas,
        energy_fraction: opts.energy_fraction,
        reference_hash: None,
    })
}

/// Leading singular components of a sparse feature matrix (optionally with
/// frozen column means subtracted, applied implicitly as a rank-one update)
/// by block subspace iteration. Matches the dense path within 1e-8 on
/// well-separated spectra.
pub fn orthogonalize_sparse(
    features: &CsrMatrix,
    means: Option<&ArrayView1<f64>>,
    opts: &OrthoOptions,
    seed: u64,
) -> Result<OrthoBasis> {
    if !(opts.energy_fraction > 0.0 && opts.energy_fraction <= 1.0) {
        return Err(Error::InvalidInput("energy_fraction must be in (0, 1]".into()));
    }
    let n = features.nrows();
    let m = features.ncols();
    if let Some(mu) = means {
        if mu.len() != m {
            return Err(Error::shape("orthogonalize_sparse means", m, mu.len()));
        }
    }
    // ‖A − 1·μᵀ‖²_F = ‖A‖²_F − n·Σ μ_j² (column sums equal n·μ_j).
    let total = match means {
        Some(mu) => features.frobenius_sq() - n as f64 * mu.iter().map(|v| v * v).sum::<f64>(),
        None => features.frobenius_sq(),
    };
    if total <= 1e-300 {
        return Err(Error::Numerical("zero feature matrix: no positive singular values".into()));
    }

    let apply = |v: &[f64]| -> Vec<f64> {
        // w = M v with M = A − 1·μᵀ
        let mut w = features.matvec(v);
        if let Some(mu) = means {
            let shift: f64 = mu.iter().zip(v).map(|(a, b)| a * b).sum();
            for x in w.iter_mut() {
                *x -= shift;
            }
        }
        w
    };
    let apply_t = |u: &[f64]| -> Vec<f64> {
        // w = Mᵀ u = Aᵀu − μ·(Σu)
        let mut w = features.matvec_t(u);
        if let Some(mu) = means {
            let s: f64 = u.iter().sum();
            for (x, mj) in w.iter_mut().zip(mu.iter()) {
                *x -= mj * s;
            }
        }
        w
    };

    let r_possible = n.min(m);
    let target = opts.energy_fraction * total;
    let mut block = opts.max_rank.unwrap_or(16).clamp(8, r_possible.max(1)).min(r_possible);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    loop {
        // V: m × block, random orthonormal start.
        let mut v: Vec<Vec<f64>> = (0..block)
            .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        gram_schmidt(&mut v);
        let mut prev_evals: Vec<f64> = vec![0.0; block];
        for _sweep in 0..500 {
            // V ← orth((MᵀM) V)
            let mut next: Vec<Vec<f64>> = Vec::with_capacity(block);
            for col in &v {
                next.push(apply_t(&apply(col)));
            }
            gram_schmidt(&mut next);
            v = next;
            // Rayleigh–Ritz on the current subspace.
            let (evals, _) = rayleigh_ritz(&v, &apply, &apply_t);
            let diff: f64 = evals
                .iter()
                .zip(&prev_evals)
                .map(|(a, b)| (a - b).abs() / a.abs().max(1e-300))
                .fold(0.0, f64::max);
            prev_evals = evals;
            if diff < 1e-13 {
                break;
            }
        }
        let (evals, rotated) = rayleigh_ritz(&v, &apply, &apply_t);
        let captured: f64 = evals.iter().sum();
        if captured >= target || block >= r_possible {
            // Assemble pairs (σ, v) in descending order of σ.
            let pairs: Vec<(f64, Vec<f64>)> = evals
                .iter()
                .zip(rotated)
                .map(|(l, vec)| (l.max(0.0).sqrt(), vec))
                .collect();
            return finish_basis(pairs, total, m, opts);
        }
        block = (block * 2).min(r_possible);
    }
}

/// Modified Gram–Schmidt on a set of vectors, dropping norms below 1e-14 by
/// replacing them with re-randomized unit vectors is unnecessary here; tiny
/// columns are simply normalized with a floor.
fn gram_schmidt(vs: &mut Vec<Vec<f64>>) {
    let k = vs.len();
    for i in 0..k {
        for j in 0..i {
            let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
            let vj = vs[j].clone();
            for (a, b) in vs[i].iter_mut().zip(vj) {
                *a -= dot * b;
            }
        }
        let norm: f64 = vs[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-150 {
            for a in vs[i].iter_mut() {
                *a /= norm;
            }
        }
    }
}

/// Project MᵀM onto span(v) and diagonalize; returns eigenvalues (descending)
/// and the rotated right-vectors.
fn rayleigh_ritz(
    v: &[Vec<f64>],
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    apply_t: &dyn Fn(&[f64]) -> Vec<f64>,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let b = v.len();
    let m = v[0].len();
    let images: Vec<Vec<f64>> = v.iter().map(|col| apply_t(&apply(col))).collect();
    let mut t = nalgebra::DMatrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            t[(i, j)] = v[i].iter().zip(&images[j]).map(|(a, c)| a * c).sum();
        }
    }
    // Symmetrize against roundoff.
    let t = (&t + t.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut evals = Vec::with_capacity(b);
    let mut rotated = Vec::with_capacity(b);
    for &k in &order {
        evals.push(eig.eigenvalues[k]);
        let mut col = vec![0.0; m];
        for (i, vi) in v.iter().enumerate() {
            let w = eig.eigenvectors[(i, k)];
            for (c, x) in col.iter_mut().zip(vi) {
                *c += w * x;
            }
        }
        rotated.push(col);
    }
    (evals, rotated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(n: usize, m: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, m), |_| StandardNormal.sample(&mut rng))
    }

    /// Independent oracle: singular values via Jacobi diagonalization of the
    /// Gram matrix FᵀF (different algorithm and code path from nalgebra SVD).
    fn jacobi_singular_values(f: &Array2<f64>) -> Vec<f64> {
        let m = f.ncols();
        let mut g = f.t().dot(f);
        for _ in 0..200 {
            let mut off = 0.0;
            for p in 0..m {
                for q in (p + 1)..m {
                    off += g[(p, q)].abs();
                }
            }
            if off < 1e-14 {
                break;
            }
            for p in 0..m {
                for q in (p + 1)..m {
                    if g[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = 0.5 * (g[(q, q)] - g[(p, p)]) / g[(p, q)];
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..m {
                        let gkp = g[(k, p)];
                        let gkq = g[(k, q)];
                        g[(k, p)] = c * gkp - s * gkq;
                        g[(k, q)] = s * gkp + c * gkq;
                    }
                    for k in 0..m {
                        let gpk = g[(p, k)];
                        let gqk = g[(q, k)];
                        g[(p, k)] = c * gpk - s * gqk;
                        g[(q, k)] = s * gpk + c * gqk;
                    }
                }
            }
        }
        let mut evals: Vec<f64> = (0..m).map(|k| g[(k, k)].max(0.0).sqrt()).collect();
        evals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        evals
    }

    fn orthonormality_error(q: &Array2<f64>) -> f64 {
        let g = q.t().dot(q);
        let mut err: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let expect = if i == j { 1.0 } else { 0.0 };
                err = err.max((g[(i, j)] - expect).abs());
            }
        }
        err
    }

    #[test]
    fn orthonormal_input_gives_orthonormal_q() {
        // Build a matrix with exactly orthonormal columns via QR of a random
        // matrix, then check B is a signed permutation-like map: QᵀQ = I.
        let raw = random_matrix(50, 8, 1);
        let qr = nalgebra::DMatrix::from_row_iterator(50, 8, raw.iter().cloned()).qr();
        let qmat = qr.q();
        let features = Array2::from_shape_fn((50, 8), |(i, j)| qmat[(i, j)]);
        let basis = orthogonalize(&features.view(), &OrthoOptions::default()).unwrap();
        assert_eq!(basis.rank(), 8);
        for s in basis.singular_values().iter() {
            assert_abs_diff_eq!(*s, 1.0, epsilon = 1e-10);
        }
        let q = basis.apply(&features.view()).unwrap();
        assert!(orthonormality_error(&q) < 1e-10);
    }

    #[test]
    fn rank_one_matrix_keeps_single_component() {
        let u = random_matrix(30, 1, 2);
        let v = random_matrix(1, 12, 3);
        let f = u.dot(&v);
        let basis =
            orthogonalize(&f.view(), &OrthoOptions { energy_fraction: 0.99, max_rank: None }).unwrap();
        assert_eq!(basis.rank(), 1);
    }

    #[test]
    fn energy_rule_matches_full_svd_oracle() {
        let f = random_matrix(200, 40, 4);
        let opts = OrthoOptions { energy_fraction: 0.99, max_rank: None };
        let basis = orthogonalize(&f.view(), &opts).unwrap();
        let oracle = jacobi_singular_values(&f);
        // Our kept singular values match the oracle's leading ones.
        for (k, s) in basis.singular_values().iter().enumerate() {
            assert_abs_diff_eq!(*s, oracle[k], epsilon = 1e-8 * oracle[0]);
        }
        // Rank is the minimal r with cumulative energy ≥ 0.99 of the total.
        let total: f64 = oracle.iter().map(|s| s * s).sum();
        let mut cum = 0.0;
        let mut minimal = 0;
        for s in &oracle {
            cum += s * s;
            minimal += 1;
            if cum >= 0.99 * total {
                break;
            }
        }
        assert_eq!(basis.rank(), minimal);
        let kept: f64 = basis.singular_values().iter().map(|s| s * s).sum();
        assert!(kept >= 0.99 * total * (1.0 - 1e-12));
    }

    #[test]
    fn q_orthonormal_at_reference_points() {
        let f = random_matrix(300, 25, 5);
        let basis = orthogonalize(&f.view(), &OrthoOptions::default()).unwrap();
        let q = basis.apply(&f.view()).unwrap();
        assert!(orthonormality_error(&q) < 1e-8, "err = {}", orthonormality_error(&q));
    }

    #[test]
    fn apply_checks_shape_and_handles_single_row() {
        let f = random_matrix(40, 6, 6);
        let basis = orthogonalize(&f.view(), &OrthoOptions::default()).unwrap();
        let one = random_matrix(1, 6, 7);
        let out = basis.apply(&one.view()).unwrap();
        assert_eq!(out.nrows(), 1);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(basis.apply(&random_matrix(3, 5, 8).view()).is_err());
    }

    #[test]
    fn projection_reconstructs_rank_r_part() {
        // Row φ of the original matrix, mapped through B then back through
        // B⁺ = Σ_r V_rᵀ, equals the rank-r truncation of φ.
        let f = random_matrix(60, 10, 9);
        let opts = OrthoOptions { energy_fraction: 0.9, max_rank: None };
        let basis = orthogonalize(&f.view(), &opts).unwrap();
        let r = basis.rank();
        // B⁺ from B: pseudoinverse of m×r B with orthogonal columns scaled by
        // 1/σ: B⁺ = (BᵀB)⁻¹Bᵀ; for B = VΣ⁻¹ this is ΣVᵀ.
        let b = basis.b();
        let btb = b.t().dot(b);
        let btb_na = nalgebra::DMatrix::from_row_iterator(r, r, btb.iter().cloned());
        let inv = btb_na.try_inverse().unwrap();
        let inv_nd = Array2::from_shape_fn((r, r), |(i, j)| inv[(i, j)]);
        let b_pinv = inv_nd.dot(&b.t().to_owned());
        // Oracle truncation via the full SVD from nalgebra.
        let na = nalgebra::DMatrix::from_row_iterator(60, 10, f.iter().cloned());
        let svd = na.clone().svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &c| {
            svd.singular_values[c].partial_cmp(&svd.singular_values[a]).unwrap()
        });
        for i in 0..5 {
            let row = f.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let projected = basis.apply(&row.view()).unwrap().dot(&b_pinv);
            for j in 0..10 {
                let mut truncated = 0.0;
                for &k in order.iter().take(r) {
                    truncated += u[(i, k)] * svd.singular_values[k] * vt[(k, j)];
                }
                assert_abs_diff_eq!(projected[(0, j)], truncated, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn zero_matrix_is_an_error() {
        let f = Array2::<f64>::zeros((10, 4));
        assert!(orthogonalize(&f.view(), &OrthoOptions::default()).is_err());
    }

    #[test]
    fn sign_convention_is_reproducible() {
        let f = random_matrix(80, 12, 10);
        let a = orthogonalize(&f.view(), &OrthoOptions::default()).unwrap();
        let b = orthogonalize(&f.view(), &OrthoOptions::default()).unwrap();
        assert_eq!(a.b(), b.b());
        // Largest-magnitude entry of each right singular vector is positive,
        // i.e. of each column of B·diag(σ).
        for k in 0..a.rank() {
            let col: Vec<f64> = (0..12).map(|j| a.b()[(j, k)] * a.singular_values()[k]).collect();
            let lead = col.iter().cloned().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn zero_mean_features_produce_zero_sum_q_columns() {
        let mut f = random_matrix(100, 9, 11);
        let means = f.mean_axis(ndarray::Axis(0)).unwrap();
        for mut row in f.rows_mut() {
            for (v, m) in row.iter_mut().zip(means.iter()) {
                *v -= m;
            }
        }
        let basis = orthogonalize(&f.view(), &OrthoOptions::default()).unwrap();
        let q = basis.apply(&f.view()).unwrap();
        for j in 0..basis.rank() {
            let s: f64 = q.column(j).sum();
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn sparse_path_matches_dense() {
        // Small banded matrix: compare subspace iteration against dense SVD.
        let n = 60;
        let m = 20;
        let mut rows = Vec::with_capacity(n);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for i in 0..n {
            let mut entries = Vec::new();
            for j in 0..m {
                let dist = (i as f64 * m as f64 / n as f64 - j as f64).abs();
                if dist < 3.0 {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    entries.push((j, v + 2.0));
                }
            }
            rows.push(entries);
        }
        let sp = CsrMatrix::from_rows(m, rows);
        let dense = sp.to_dense();
        let opts = OrthoOptions { energy_fraction: 0.95, max_rank: None };
        let a = orthogonalize(&dense.view(), &opts).unwrap();
        let b = orthogonalize_sparse(&sp, None, &opts, 99).unwrap();
        assert_eq!(a.rank(), b.rank());
        for k in 0..a.rank() {
            assert_abs_diff_eq!(
                a.singular_values()[k],
                b.singular_values()[k],
                epsilon = 1e-8 * a.singular_values()[0]
            );
        }
        for (x, y) in a.b().iter().zip(b.b().iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-7);
        }
    }

    #[test]
    fn sparse_path_applies_frozen_means() {
        let n = 40;
        let m = 8;
        let dense = random_matrix(n, m, 13).mapv(|v| v.abs());
        let rows: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| (0..m).map(|j| (j, dense[(i, j)])).collect())
            .collect();
        let sp = CsrMatrix::from_rows(m, rows);
        let means = sp.column_means();
        let mut centered = dense.clone();
        for mut row in centered.rows_mut() {
            for (v, mu) in row.iter_mut().zip(means.iter()) {
                *v -= mu;
            }
        }
        let opts = OrthoOptions { energy_fraction: 0.999, max_rank: None };
        let a = orthogonalize(&centered.view(), &opts).unwrap();
        let b = orthogonalize_sparse(&sp, Some(&means.view()), &opts, 5).unwrap();
        assert_eq!(a.rank(), b.rank());
        for k in 0..a.rank() {
            assert_abs_diff_eq!(
                a.singular_values()[k],
                b.singular_values()[k],
                epsilon = 1e-8 * a.singular_values()[0]
            );
        }
    }
}
