//! Data-adapted functional spaces: asymmetric Gaussian mollifier kernels with
//! per-center inverse-bandwidth matrices, plus linear and quadratic
//! polynomial variants. Evaluation returns feature matrices together with
//! their analytic gradients and Hessians, which the flow and the closed-form
//! map inversion both consume.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Exponent threshold for compact-support truncation of time-like kernels:
/// the kernel value is set to 0 when ½(p−c)ᵀS(p−c) > 18.
const TRUNCATION_EXPONENT: f64 = 18.0;

/// Rows are processed in parallel above this size; per-row writes only, so
/// results are identical for any thread count.
const PAR_ROW_THRESHOLD: usize = 4096;

/// A kernel center with its inverse-bandwidth matrix (the effective S_j,
/// user scale γ already applied).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Center {
    #[serde(with = "crate::serialize::vec1")]
    pub location: Array1<f64>,
    #[serde(with = "crate::serialize::mat2")]
    pub inv_bandwidth: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Kernel,
    Linear,
    Quadratic,
}

/// A finite-dimensional function space over points in `R^dim`.
///
/// Immutable once the zero-mean columns are frozen; evaluation is pure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpace {
    kind: SpaceKind,
    dim: usize,
    centers: Vec<Center>,
    gamma: f64,
    zero_mean: bool,
    truncated: bool,
    frozen_means: Option<Vec<f64>>,
}

impl KernelSpace {
    pub fn kernel(centers: Vec<Center>, gamma: f64, zero_mean: bool, truncated: bool) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidInput("kernel space needs at least one center".into()));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidInput("gamma must be positive".into()));
        }
        let dim = centers[0].location.len();
        for c in &centers {
            if c.location.len() != dim || c.inv_bandwidth.nrows() != dim || c.inv_bandwidth.ncols() != dim {
                return Err(Error::shape("KernelSpace::kernel", dim, c.location.len()));
            }
        }
        Ok(Self { kind: SpaceKind::Kernel, dim, centers, gamma, zero_mean, truncated, frozen_means: None })
    }

    pub fn linear(dim: usize, zero_mean: bool) -> Self {
        Self {
            kind: SpaceKind::Linear,
            dim,
            centers: Vec::new(),
            gamma: 1.0,
            zero_mean,
            truncated: false,
            frozen_means: None,
        }
    }

    pub fn quadratic(dim: usize, zero_mean: bool) -> Self {
        Self {
            kind: SpaceKind::Quadratic,
            dim,
            centers: Vec::new(),
            gamma: 1.0,
            zero_mean,
            truncated: false,
            frozen_means: None,
        }
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centers(&self) -> &[Center] {
        &self.centers
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_zero_mean(&self) -> bool {
        self.zero_mean
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    pub fn frozen_means(&self) -> Option<&[f64]> {
        self.frozen_means.as_deref()
    }

    /// Install precomputed column means (sparse evaluation path, where the
    /// dense mean pass is avoided).
    pub fn set_frozen_means(&mut self, means: Vec<f64>) {
        debug_assert_eq!(means.len(), self.n_columns());
        self.frozen_means = Some(means);
    }

    /// Number of feature columns.
    pub fn n_columns(&self) -> usize {
        match self.kind {
            SpaceKind::Kernel => self.centers.len(),
            SpaceKind::Linear => self.dim,
            SpaceKind::Quadratic => self.dim + self.dim * (self.dim + 1) / 2,
        }
    }

    /// Compute column means over the reference points and freeze them; they
    /// are subtracted at every subsequent evaluation. Only meaningful for
    /// zero-mean spaces (the columns of F must have zero empirical mean).
    pub fn freeze_means(&mut self, reference: &ArrayView2<f64>) -> Result<()> {
        if !self.zero_mean {
            return Ok(());
        }
        let raw = self.eval_raw(reference)?;
        let n = raw.nrows().max(1) as f64;
        self.frozen_means = Some(raw.sum_axis(Axis(0)).iter().map(|s| s / n).collect());
        Ok(())
    }

    fn check_dim(&self, points: &ArrayView2<f64>, context: &'static str) -> Result<()> {
        if points.ncols() != self.dim {
            return Err(Error::shape(context, self.dim, points.ncols()));
        }
        Ok(())
    }

    /// Feature matrix F(points): entry (i, j) = j-th basis function at row i.
    /// Frozen zero-mean offsets are subtracted when present.
    pub fn eval(&self, points: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = self.eval_raw(points)?;
        if let Some(means) = &self.frozen_means {
            for mut row in out.rows_mut() {
                for (v, m) in row.iter_mut().zip(means) {
                    *v -= m;
                }
            }
        }
        Ok(out)
    }

    /// Raw feature values, before any zero-mean adjustment.
    pub fn eval_raw(&self, points: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dim(points, "KernelSpace::eval")?;
        let n = points.nrows();
        let m = self.n_columns();
        let mut out = Array2::zeros((n, m));
        match self.kind {
            SpaceKind::Kernel => {
                let fill = |mut row: ndarray::ArrayViewMut1<f64>, p: ArrayView1<f64>| {
                    for (j, c) in self.centers.iter().enumerate() {
                        row[j] = self.kernel_value(&p, c);
                    }
                };
                let zip = Zip::from(out.rows_mut()).and(points.rows());
                if n >= PAR_ROW_THRESHOLD {
                    zip.par_for_each(fill);
                } else {
                    zip.for_each(fill);
                }
            }
            SpaceKind::Linear => {
                for (i, p) in points.rows().into_iter().enumerate() {
                    for l in 0..self.dim {
                        out[(i, l)] = p[l];
                    }
                }
            }
            SpaceKind::Quadratic => {
                for (i, p) in points.rows().into_iter().enumerate() {
                    for l in 0..self.dim {
                        out[(i, l)] = p[l];
                    }
                    let mut col = self.dim;
                    for l in 0..self.dim {
                        for h in l..self.dim {
                            out[(i, col)] = p[l] * p[h];
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn kernel_value(&self, p: &ArrayView1<f64>, c: &Center) -> f64 {
        let d = self.dim;
        let mut q = 0.0;
        for a in 0..d {
            let da = p[a] - c.location[a];
            let mut acc = 0.0;
            for b in 0..d {
                acc += c.inv_bandwidth[(a, b)] * (p[b] - c.location[b]);
            }
            q += da * acc;
        }
        let e = 0.5 * q;
        if self.truncated && e > TRUNCATION_EXPONENT {
            0.0
        } else {
            (-e).exp()
        }
    }

    /// Analytic gradient of every feature column: (n, m, d) tensor with
    /// entry (i, j, k) = ∂F^j/∂p^k at row i. For kernel columns
    /// ∇K = −K·S_j(p−c_j).
    pub fn eval_grad(&self, points: &ArrayView2<f64>) -> Result<Array3<f64>> {
        self.check_dim(points, "KernelSpace::eval_grad")?;
        let n = points.nrows();
        let m = self.n_columns();
        let d = self.dim;
        let mut out = Array3::zeros((n, m, d));
        match self.kind {
            SpaceKind::Kernel => {
                let process = |i: usize, mut block: ndarray::ArrayViewMut2<f64>| {
                    let p = points.row(i);
                    for (j, c) in self.centers.iter().enumerate() {
                        let k = self.kernel_value(&p, c);
                        if k == 0.0 {
                            continue;
                        }
                        for a in 0..d {
                            let mut s = 0.0;
                            for b in 0..d {
                                s += c.inv_bandwidth[(a, b)] * (p[b] - c.location[b]);
                            }
                            block[(j, a)] = -k * s;
                        }
                    }
                };
                if n >= PAR_ROW_THRESHOLD {
                    out.axis_iter_mut(Axis(0))
                        .into_par_iter()
                        .enumerate()
                        .for_each(|(i, block)| process(i, block));
                } else {
                    for (i, block) in out.axis_iter_mut(Axis(0)).enumerate() {
                        process(i, block);
                    }
                }
            }
            SpaceKind::Linear => {
                for i in 0..n {
                    for l in 0..d {
                        out[(i, l, l)] = 1.0;
                    }
                }
            }
            SpaceKind::Quadratic => {
                for (i, p) in points.rows().into_iter().enumerate() {
                    for l in 0..d {
                        out[(i, l, l)] = 1.0;
                    }
                    let mut col = d;
                    for l in 0..d {
                        for h in l..d {
                            out[(i, col, l)] += p[h];
                            out[(i, col, h)] += p[l];
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Analytic Hessian of every feature column: (n, m, d, d) tensor. For
    /// kernel columns ∂²K = K·(S(p−c)(p−c)ᵀS − S).
    pub fn eval_hess(&self, points: &ArrayView2<f64>) -> Result<Array4<f64>> {
        self.check_dim(points, "KernelSpace::eval_hess")?;
        let n = points.nrows();
        let m = self.n_columns();
        let d = self.dim;
        let mut out = Array4::zeros((n, m, d, d));
        match self.kind {
            SpaceKind::Kernel => {
                for i in 0..n {
                    let p = points.row(i);
                    for (j, c) in self.centers.iter().enumerate() {
                        let k = self.kernel_value(&p, c);
                        if k == 0.0 {
                            continue;
                        }
                        let mut sv = vec![0.0; d];
                        for a in 0..d {
                            for b in 0..d {
                                sv[a] += c.inv_bandwidth[(a, b)] * (p[b] - c.location[b]);
                            }
                        }
                        for a in 0..d {
                            for b in 0..d {
                                out[(i, j, a, b)] = k * (sv[a] * sv[b] - c.inv_bandwidth[(a, b)]);
                            }
                        }
                    }
                }
            }
            SpaceKind::Linear => {}
            SpaceKind::Quadratic => {
                for i in 0..n {
                    let mut col = d;
                    for l in 0..d {
                        for h in l..d {
                            out[(i, col, l, h)] += 1.0;
                            out[(i, col, h, l)] += 1.0;
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Sparse feature matrix for truncated (time-like) spaces, raw values
    /// without mean subtraction. Rows are points, columns centers.
    pub fn eval_sparse(&self, points: &ArrayView2<f64>) -> Result<CsrMatrix> {
        if self.kind != SpaceKind::Kernel || !self.truncated {
            return Err(Error::InvalidInput(
                "eval_sparse requires a truncated kernel space".into(),
            ));
        }
        self.check_dim(points, "KernelSpace::eval_sparse")?;
        let rows: Vec<Vec<(usize, f64)>> = points
            .rows()
            .into_iter()
            .map(|p| {
                self.centers
                    .iter()
                    .enumerate()
                    .filter_map(|(j, c)| {
                        let v = self.kernel_value(&p, c);
                        (v != 0.0).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        Ok(CsrMatrix::from_rows(self.centers.len(), rows))
    }
}

/// k-means centers for a kernel space: `m = min(⌊√n⌋, m_max)` clusters,
/// k-means++ seeding, a fixed iteration cap, deterministic for a given seed.
/// Coincident centers on degenerate inputs are deduplicated.
pub fn select_centers(points: &ArrayView2<f64>, m_max: usize, seed: u64) -> Result<Vec<Array1<f64>>> {
    let n = points.nrows();
    let d = points.ncols();
    if n < 2 {
        return Err(Error::InvalidInput("select_centers: n >= 2 required".into()));
    }
    if m_max < 1 {
        return Err(Error::InvalidInput("select_centers: m_max >= 1 required".into()));
    }
    let m = ((n as f64).sqrt().floor() as usize).min(m_max).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let dist_sq = |a: &ArrayView1<f64>, b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(m);
    let first = rng.random_range(0..n);
    centers.push(points.row(first).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| dist_sq(&points.row(i), &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(points.row(idx).to_vec());
        let last = centers.last().unwrap().clone();
        for i in 0..n {
            d2[i] = d2[i].min(dist_sq(&points.row(i), &last));
        }
    }

    // Lloyd iterations with a fixed cap.
    let k = centers.len();
    let mut assign = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let dd = dist_sq(&points.row(i), c);
                if dd < best_d {
                    best_d = dd;
                    best = j;
                }
            }
            dists[i] = best_d;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        // Empty clusters steal the point currently farthest from its center.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap())
                    .unwrap();
                counts[assign[far]] -= 1;
                assign[far] = j;
                counts[j] = 1;
                dists[far] = 0.0;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        for i in 0..n {
            for a in 0..d {
                sums[assign[i]][a] += points[(i, a)];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for a in 0..d {
                    centers[j][a] = sums[j][a] / counts[j] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    // Deduplicate coincident centers (degenerate data collapses clusters).
    let scale = crate::stats::variance_trace(points).sqrt().max(1e-300);
    let tol = 1e-9 * scale;
    let mut unique: Vec<Array1<f64>> = Vec::new();
    for c in centers {
        let candidate = Array1::from_vec(c);
        let dup = unique.iter().any(|u| {
            u.iter()
                .zip(candidate.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                <= tol
        });
        if !dup {
            unique.push(candidate);
        }
    }
    Ok(unique)
}

/// Rule-of-thumb bandwidth multiplier `(4/(d+2))^{1/(d+4)} / m^{1/(d+4)}`.
pub fn rule_of_thumb_alpha(d: usize, m: usize) -> f64 {
    let e = 1.0 / (d as f64 + 4.0);
    (4.0 / (d as f64 + 2.0)).powf(e) / (m as f64).powf(e)
}

/// Candidate grid for the leave-one-out searches: 21 logarithmically spaced
/// points over [α_rot/5, 5·α_rot].
fn loo_grid(alpha_rot: f64) -> Vec<f64> {
    let lo = (alpha_rot / 5.0).ln();
    let hi = (alpha_rot * 5.0).ln();
    (0..21).map(|i| (lo + (hi - lo) * i as f64 / 20.0).exp()).collect()
}

/// Four-step data-adapted bandwidth fit:
/// 1. global mollified covariance Σ over the centers, ridge ε = var(ref)/m;
/// 2. global scale α by leave-one-out maximum likelihood on a grid centered
///    at the rule-of-thumb value;
/// 3. local rescale S_j = γ_α(c_j)^{2/d}·S_α so each kernel covers a roughly
///    constant number of neighbors;
/// 4. second leave-one-out pass for a global β, giving S_j⁰ = S_j/β².
///
/// The returned inverse bandwidths are S_j⁰/γ² (user scale applied). The fit
/// depends only on centers and reference points, never on outcomes.
pub fn fit_bandwidths(
    centers: &[Array1<f64>],
    reference: &ArrayView2<f64>,
    gamma: f64,
) -> Result<Vec<Center>> {
    let m = centers.len();
    if m < 2 {
        return Err(Error::InvalidInput("fit_bandwidths: need at least 2 distinct centers".into()));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidInput("gamma must be positive".into()));
    }
    let d = centers[0].len();
    if centers.iter().any(|c| c.len() != d) {
        return Err(Error::shape("fit_bandwidths", d, 0usize));
    }
    let two_pi_pow = (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0);

    // Step 1: covariance of the centers plus ridge from the reference spread.
    let mut mean = vec![0.0; d];
    for c in centers {
        for a in 0..d {
            mean[a] += c[a];
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut cov = Array2::zeros((d, d));
    for c in centers {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (c[a] - mean[a]) * (c[b] - mean[b]);
            }
        }
    }
    cov /= m as f64;
    let mut eps = crate::stats::variance_trace(reference) / m as f64;
    if eps <= 0.0 {
        eps = cov.diag().sum() / m as f64;
    }
    if eps <= 0.0 {
        return Err(Error::InvalidInput("fit_bandwidths: all centers identical".into()));
    }
    for a in 0..d {
        cov[(a, a)] += eps;
    }
    let cov_na = nalgebra::DMatrix::from_row_iterator(d, d, cov.iter().cloned());
    let s_g_na = cov_na
        .try_inverse()
        .ok_or_else(|| Error::Numerical("global covariance not invertible despite ridge".into()))?;
    let det_sg = s_g_na.determinant();
    let mut s_g = Array2::zeros((d, d));
    for a in 0..d {
        for b in 0..d {
            s_g[(a, b)] = s_g_na[(a, b)];
        }
    }

    // Pairwise quadratic forms under S_g.
    let mut q = Array2::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let mut acc = 0.0;
            for a in 0..d {
                let da = centers[i][a] - centers[j][a];
                let mut s = 0.0;
                for b in 0..d {
                    s += s_g[(a, b)] * (centers[i][b] - centers[j][b]);
                }
                acc += da * s;
            }
            q[(i, j)] = acc;
            q[(j, i)] = acc;
        }
    }

    // Step 2: α by leave-one-out maximum likelihood over a finite grid.
    let alpha_rot = rule_of_thumb_alpha(d, m);
    let grid = loo_grid(alpha_rot);
    let gamma_loo = |alpha: f64| -> Vec<f64> {
        // Fully normalized Gaussian KDE values: each component carries
        // det(S_g/α²)^{1/2}/(2π)^{d/2}; the 1/(m−1) averages over neighbors.
        let norm = det_sg.sqrt() / (two_pi_pow * alpha.powi(d as i32) * (m as f64 - 1.0));
        (0..m)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..m {
                    if j != i {
                        s += (-q[(i, j)] / (2.0 * alpha * alpha)).exp();
                    }
                }
                (norm * s).max(1e-300)
            })
            .collect()
    };
    let mut alpha_star = grid[0];
    let mut best = f64::NEG_INFINITY;
    for &alpha in &grid {
        let ll: f64 = gamma_loo(alpha).iter().map(|g| g.ln()).sum();
        if ll > best {
            best = ll;
            alpha_star = alpha;
        }
    }
    let dens = gamma_loo(alpha_star);

    // Step 3: local rescale by the estimated density.
    let s_alpha = &s_g / (alpha_star * alpha_star);
    let local: Vec<Array2<f64>> = (0..m)
        .map(|j| &s_alpha * dens[j].powf(2.0 / d as f64))
        .collect();
    let local_det_sqrt: Vec<f64> = local
        .iter()
        .map(|s| {
            nalgebra::DMatrix::from_row_iterator(d, d, s.iter().cloned())
                .determinant()
                .max(0.0)
                .sqrt()
        })
        .collect();

    // Step 4: β by a second leave-one-out pass with the local matrices and
    // weights 1/γ_α(c_j).
    let mut q2 = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let mut acc = 0.0;
            for a in 0..d {
                let da = centers[i][a] - centers[j][a];
                let mut s = 0.0;
                for b in 0..d {
                    s += local[j][(a, b)] * (centers[i][b] - centers[j][b]);
                }
                acc += da * s;
            }
            q2[(i, j)] = acc;
        }
    }
    let mut beta_star = grid[0];
    let mut best = f64::NEG_INFINITY;
    for &beta in &grid {
        let mut ll = 0.0;
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..m {
                if j != i {
                    s += local_det_sqrt[j] * (-q2[(i, j)] / (2.0 * beta * beta)).exp() / dens[j];
                }
            }
            let val = s / (two_pi_pow * beta.powi(d as i32) * (m as f64 - 1.0));
            ll += val.max(1e-300).ln();
        }
        if ll > best {
            best = ll;
            beta_star = beta;
        }
    }

    let scale = beta_star * beta_star * gamma * gamma;
    Ok(centers
        .iter()
        .zip(local)
        .map(|(loc, s)| Center { location: loc.clone(), inv_bandwidth: s / scale })
        .collect())
}

/// Select centers, fit bandwidths and assemble a kernel space in one call.
pub fn build_kernel_space(
    points: &ArrayView2<f64>,
    m_max: usize,
    gamma: f64,
    zero_mean: bool,
    truncated: bool,
    seed: u64,
) -> Result<KernelSpace> {
    let centers = select_centers(points, m_max, seed)?;
    if centers.len() < 2 {
        return Err(Error::InvalidInput(
            "degenerate data: fewer than 2 distinct kernel centers".into(),
        ));
    }
    let fitted = fit_bandwidths(&centers, points, gamma)?;
    KernelSpace::kernel(fitted, gamma, zero_mean, truncated)
}
