//! Small statistical helpers shared by the solver, the density estimators and
//! the test suites: moments, quantiles, normal distribution functions,
//! Kolmogorov–Smirnov tests and trapezoid quadrature.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Mean of a slice. Empty input returns 0.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Row-wise mean of a matrix: returns a d-vector.
pub fn row_mean(m: &ArrayView2<f64>) -> Array1<f64> {
    let n = m.nrows().max(1) as f64;
    m.sum_axis(ndarray::Axis(0)) / n
}

/// Total variance of the rows of `m`: `(1/n) Σ_i ‖m_i − m̄‖²`, the trace of
/// the sample covariance (1/n normalization).
pub fn variance_trace(m: &ArrayView2<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mu = row_mean(m);
    let mut acc = 0.0;
    for row in m.rows() {
        for (v, c) in row.iter().zip(mu.iter()) {
            let d = v - c;
            acc += d * d;
        }
    }
    acc / n as f64
}

/// Linear-interpolation quantile (type 7) of an unsorted slice.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile level out of range");
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Error function, Abramowitz & Stegun 7.1.26 (|error| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

pub fn normal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    0.5 * (1.0 + erf((x - mu) / (sigma * std::f64::consts::SQRT_2)))
}

pub fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Survival function of the Kolmogorov distribution,
/// `Q(t) = 2 Σ_{j≥1} (−1)^{j−1} exp(−2 j² t²)`.
pub fn kolmogorov_sf(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64).powi(2) * t * t).exp();
        if term < 1e-16 {
            break;
        }
        sum += if j % 2 == 1 { term } else { -term };
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test against a normal with parameters fitted from the data.
/// Returns `(statistic, p)` with the asymptotic p-value (Stephens correction).
pub fn ks_test_fitted_normal(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n >= 2, "KS test needs at least two samples");
    let mu = mean(xs);
    let sd = (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = normal_cdf(*x, mu, sd.max(1e-300));
        let lo = i as f64 / n as f64;
        let hi = (i + 1) as f64 / n as f64;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    let sn = (n as f64).sqrt();
    let p = kolmogorov_sf(d * (sn + 0.12 + 0.11 / sn));
    (d, p)
}

/// Two-sample KS test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert!(!a.is_empty() && !b.is_empty());
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let xa = sa[i];
        let xb = sb[j];
        if xa <= xb {
            i += 1;
        }
        if xb <= xa {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let p = kolmogorov_sf(ne.sqrt() * d);
    (d, p)
}

/// Trapezoid rule over grid points `xs` (strictly increasing) with values `ys`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mut acc = 0.0;
    for i in 1..xs.len() {
        acc += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
    }
    acc
}

/// Multivariate normal density with full covariance, backed by a Cholesky
/// factorization. Covariance must be symmetric positive definite.
#[derive(Debug, Clone)]
pub struct MvNormal {
    mean: Array1<f64>,
    chol_lower: Array2<f64>,
    log_norm: f64,
}

impl MvNormal {
    pub fn new(mean: Array1<f64>, cov: Array2<f64>) -> crate::Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(crate::Error::shape("MvNormal", format!("{d}x{d}"), format!("{}x{}", cov.nrows(), cov.ncols())));
        }
        let m = nalgebra::DMatrix::from_row_iterator(d, d, cov.iter().cloned());
        let chol = nalgebra::Cholesky::new(m)
            .ok_or_else(|| crate::Error::Numerical("covariance not positive definite".into()))?;
        let l = chol.l();
        let mut log_det = 0.0;
        for i in 0..d {
            log_det += l[(i, i)].ln();
        }
        let log_norm = -(d as f64) * 0.5 * (2.0 * std::f64::consts::PI).ln() - log_det;
        let mut lower = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..=i {
                lower[(i, j)] = l[(i, j)];
            }
        }
        Ok(Self { mean, chol_lower: lower, log_norm })
    }

    pub fn standard(d: usize) -> Self {
        Self::new(Array1::zeros(d), Array2::eye(d)).unwrap()
    }

    /// Moment-matched to the rows of `samples` (sample mean and covariance,
    /// 1/n normalization, with a small ridge for numerical safety).
    pub fn moment_matched(samples: &ArrayView2<f64>) -> crate::Result<Self> {
        let n = samples.nrows();
        let d = samples.ncols();
        if n < 2 {
            return Err(crate::Error::InvalidInput("moment matching needs n >= 2".into()));
        }
        let mu = row_mean(samples);
        let mut cov = Array2::zeros((d, d));
        for row in samples.rows() {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (row[a] - mu[a]) * (row[b] - mu[b]);
                }
            }
        }
        cov /= n as f64;
        let ridge = 1e-10 * (1.0 + cov.diag().sum() / d as f64);
        for a in 0..d {
            cov[(a, a)] += ridge;
        }
        Self::new(mu, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn log_pdf(&self, x: &ArrayView1<f64>) -> f64 {
        let d = self.mean.len();
        // Solve L w = (x - mean) by forward substitution; |w|² is the
        // Mahalanobis distance.
        let mut w = vec![0.0; d];
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol_lower[(i, j)] * w[j];
            }
            w[i] = s / self.chol_lower[(i, i)];
        }
        self.log_norm - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn pdf(&self, x: &ArrayView1<f64>) -> f64 {
        self.log_pdf(x).exp()
    }

    /// Draw `n` samples with the provided RNG (x = mean + L·standard_normal).
    pub fn sample<R: rand::Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let d = self.mean.len();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            for a in 0..d {
                let mut v = self.mean[a];
                for b in 0..=a {
                    v += self.chol_lower[(a, b)] * eps[b];
                }
                out[(i, a)] = v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn erf_reference_values() {
        assert_abs_diff_eq!(erf(0.0), 0.0, epsilon = 2e-7);
        assert_abs_diff_eq!(erf(1.0), 0.8427007929, epsilon = 2e-7);
        assert_abs_diff_eq!(erf(-1.0), -0.8427007929, epsilon = 2e-7);
        assert_abs_diff_eq!(erf(2.0), 0.9953222650, epsilon = 2e-7);
    }

    #[test]
    fn quantile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(quantile(&xs, 0.5), 2.5);
        assert_abs_diff_eq!(quantile(&xs, 0.0), 1.0);
        assert_abs_diff_eq!(quantile(&xs, 1.0), 4.0);
    }

    #[test]
    fn ks_accepts_normal_samples() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let xs: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (_, p) = ks_test_fitted_normal(&xs);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn ks_two_sample_separates() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..800).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..800)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v + 2.0
            })
            .collect();
        let (_, p_same) = ks_two_sample(&a, &a);
        let (_, p_diff) = ks_two_sample(&a, &b);
        assert!(p_same > 0.5);
        assert!(p_diff < 1e-6);
    }

    #[test]
    fn mvn_matches_univariate() {
        let m = MvNormal::new(array![1.0], array![[4.0]]).unwrap();
        let x = array![2.0];
        assert_abs_diff_eq!(m.pdf(&x.view()), normal_pdf(2.0, 1.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn trapezoid_integrates_linear() {
        let xs: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        assert_abs_diff_eq!(trapezoid(&xs, &ys), 1.0, epsilon = 1e-12);
    }
}
