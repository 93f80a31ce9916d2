//! Grid-based nonparametric Bayesian inference: the likelihood ρ(x|z) comes
//! from the fitted barycenter model through the change-of-variables
//! evaluator, the default prior is a kernel-smoothed estimate of the
//! training covariates, and online updates accumulate in log space.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::data::RawValue;
use crate::kernelspace::{fit_bandwidths, select_centers};
use crate::{Error, Result};

use super::density::ConditionalDensity;

/// Evaluation grid over the inferred parameters, with quadrature weights
/// used for normalization (trapezoid in 1D).
#[derive(Debug, Clone)]
pub struct ThetaGrid {
    /// g × d_θ raw parameter values.
    pub points: Array2<f64>,
    /// Quadrature weights, length g.
    pub weights: Array1<f64>,
}

impl ThetaGrid {
    /// Uniform 1D grid with trapezoid weights.
    pub fn linspace(min: f64, max: f64, count: usize) -> Result<Self> {
        if count < 2 || !(min < max) {
            return Err(Error::InvalidInput("linspace: need count >= 2 and min < max".into()));
        }
        let h = (max - min) / (count - 1) as f64;
        let points = Array2::from_shape_fn((count, 1), |(i, _)| min + h * i as f64);
        let mut weights = Array1::from_elem(count, h);
        weights[0] = 0.5 * h;
        weights[count - 1] = 0.5 * h;
        Ok(Self { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Kernel-smoothed prior over embedded covariates: a Gaussian mixture at the
/// k-means centers with the adaptive bandwidths, weighted by cluster
/// occupancy.
#[derive(Debug, Clone)]
pub struct ZPrior {
    locations: Vec<Array1<f64>>,
    inv_bandwidths: Vec<Array2<f64>>,
    log_norms: Vec<f64>,
    weights: Vec<f64>,
}

/// Build the default prior from covariate samples (embedded coordinates).
/// Optional per-sample weights bias the cluster occupancies.
pub fn kernel_prior(
    z_samples: &ArrayView2<f64>,
    sample_weights: Option<&[f64]>,
    m_max: usize,
    seed: u64,
) -> Result<ZPrior> {
    let n = z_samples.nrows();
    let d = z_samples.ncols();
    if let Some(w) = sample_weights {
        if w.len() != n {
            return Err(Error::shape("kernel_prior weights", n, w.len()));
        }
        if w.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidInput("prior weights must be non-negative".into()));
        }
    }
    let centers = select_centers(z_samples, m_max, seed)?;
    if centers.len() < 2 {
        return Err(Error::InvalidInput("kernel_prior: degenerate covariates".into()));
    }
    let fitted = fit_bandwidths(&centers, z_samples, 1.0)?;
    // Occupancy: each sample contributes its weight to its nearest center.
    let mut occupancy = vec![0.0; fitted.len()];
    for i in 0..n {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in fitted.iter().enumerate() {
            let dd: f64 = (0..d).map(|a| (z_samples[(i, a)] - c.location[a]).powi(2)).sum();
            if dd < best_d {
                best_d = dd;
                best = j;
            }
        }
        occupancy[best] += sample_weights.map_or(1.0, |w| w[i]);
    }
    let total: f64 = occupancy.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("prior weights sum to zero".into()));
    }
    let two_pi_pow = (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0);
    let mut prior = ZPrior {
        locations: Vec::new(),
        inv_bandwidths: Vec::new(),
        log_norms: Vec::new(),
        weights: Vec::new(),
    };
    for (c, occ) in fitted.into_iter().zip(occupancy) {
        let det = nalgebra::DMatrix::from_iterator(d, d, c.inv_bandwidth.t().iter().cloned())
            .determinant()
            .max(0.0);
        prior.log_norms.push((det.sqrt() / two_pi_pow).ln());
        prior.locations.push(c.location);
        prior.inv_bandwidths.push(c.inv_bandwidth);
        prior.weights.push(occ / total);
    }
    Ok(prior)
}

impl ZPrior {
    /// Prior density at an embedded covariate value.
    pub fn density(&self, z: &ArrayView1<f64>) -> f64 {
        let d = z.len();
        let mut acc = 0.0;
        for (((loc, s), log_norm), w) in self
            .locations
            .iter()
            .zip(&self.inv_bandwidths)
            .zip(&self.log_norms)
            .zip(&self.weights)
        {
            let mut q = 0.0;
            for a in 0..d {
                let da = z[a] - loc[a];
                let mut sv = 0.0;
                for b in 0..d {
                    sv += s[(a, b)] * (z[b] - loc[b]);
                }
                q += da * sv;
            }
            acc += w * (log_norm - 0.5 * q).exp();
        }
        acc
    }
}

/// Posterior values on a grid. When the likelihood vanishes everywhere on
/// the grid (observation far outside the support), `normalized` is false
/// and the raw values are returned.
#[derive(Debug, Clone)]
pub struct PosteriorResult {
    pub values: Array1<f64>,
    pub normalized: bool,
}

fn normalize_on_grid(values: &mut Array1<f64>, weights: &Array1<f64>) -> bool {
    let total: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    if total <= 1e-300 || !total.is_finite() {
        return false;
    }
    values.mapv_inplace(|v| v / total);
    true
}

/// γ(z|x) ∝ ρ̂(x|z)·γ_pr(z), evaluated on a grid over raw real covariate
/// values and normalized by the grid quadrature.
pub fn bayes_posterior(
    cond: &ConditionalDensity,
    x_obs: &ArrayView1<f64>,
    prior: &ZPrior,
    grid: &ThetaGrid,
) -> Result<PosteriorResult> {
    let model = cond.model();
    if x_obs.len() != model.d_x() {
        return Err(Error::shape("bayes_posterior x_obs", model.d_x(), x_obs.len()));
    }
    if grid.points.ncols() != model.schema.columns().len() {
        return Err(Error::shape(
            "bayes_posterior grid",
            model.schema.columns().len(),
            grid.points.ncols(),
        ));
    }
    let x_mat = x_obs.to_owned().insert_axis(ndarray::Axis(0));
    let mut values = Array1::zeros(grid.len());
    for g in 0..grid.len() {
        let raw: Vec<RawValue> = grid.points.row(g).iter().map(|v| RawValue::Real(*v)).collect();
        let (dens, flags) = cond.evaluate_at(&x_mat.view(), &raw)?;
        let lik = if flags[0] { 0.0 } else { dens[0] };
        let z_emb = model.embed(&raw)?;
        values[g] = lik * prior.density(&z_emb.view());
    }
    let normalized = normalize_on_grid(&mut values, &grid.weights);
    Ok(PosteriorResult { values, normalized })
}

/// One online Bayes update in log space; adding any constant to the
/// log-likelihood leaves the normalized output unchanged bit for bit.
pub(crate) fn online_update(
    log_posterior: &mut Array1<f64>,
    log_likelihood: &ArrayView1<f64>,
    weights: &Array1<f64>,
) -> Array1<f64> {
    for (p, l) in log_posterior.iter_mut().zip(log_likelihood) {
        *p += l;
    }
    let max = log_posterior.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut values = log_posterior.mapv(|v| (v - max).exp());
    normalize_on_grid(&mut values, weights);
    values
}

/// Sequential Bayes over a parameter grid:
/// γ^{t+1}(θ) ∝ ρ̂(x_{t+1} | known_t, θ) · γ^t(θ), accumulated in log space
/// and renormalized at every step. Returns the posterior after each step.
///
/// `theta_cols` names the schema columns holding the unknown parameters (by
/// index); `obs_known[t]` supplies the remaining covariate values in schema
/// order.
pub fn bayes_online(
    cond: &ConditionalDensity,
    obs_x: &ArrayView2<f64>,
    obs_known: &[Vec<RawValue>],
    theta_cols: &[usize],
    grid: &ThetaGrid,
    prior_on_grid: &ArrayView1<f64>,
) -> Result<Vec<Array1<f64>>> {
    let model = cond.model();
    let n_cols = model.schema.columns().len();
    if theta_cols.is_empty() || theta_cols.iter().any(|c| *c >= n_cols) {
        return Err(Error::InvalidInput("theta_cols must name valid schema columns".into()));
    }
    if grid.points.ncols() != theta_cols.len() {
        return Err(Error::shape("bayes_online grid", theta_cols.len(), grid.points.ncols()));
    }
    if obs_x.nrows() != obs_known.len() {
        return Err(Error::shape("bayes_online observations", obs_x.nrows(), obs_known.len()));
    }
    if prior_on_grid.len() != grid.len() {
        return Err(Error::shape("bayes_online prior", grid.len(), prior_on_grid.len()));
    }
    if prior_on_grid.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidInput("prior values must be non-negative".into()));
    }

    let mut log_post = prior_on_grid.mapv(|v| v.max(1e-300).ln());
    let mut out = Vec::with_capacity(obs_x.nrows());
    for (t, known) in obs_known.iter().enumerate() {
        if known.len() + theta_cols.len() != n_cols {
            return Err(Error::shape("bayes_online known covariates", n_cols - theta_cols.len(), known.len()));
        }
        let x_row = obs_x.row(t).to_owned().insert_axis(ndarray::Axis(0));
        let mut log_lik = Array1::zeros(grid.len());
        for g in 0..grid.len() {
            let mut raw = Vec::with_capacity(n_cols);
            let mut known_iter = known.iter();
            for c in 0..n_cols {
                match theta_cols.iter().position(|tc| *tc == c) {
                    Some(pos) => raw.push(RawValue::Real(grid.points[(g, pos)])),
                    None => raw.push(known_iter.next().expect("length checked").clone()),
                }
            }
            let (dens, flags) = cond.evaluate_at(&x_row.view(), &raw)?;
            let lik = if flags[0] { 0.0 } else { dens[0] };
            log_lik[g] = lik.max(1e-300).ln();
        }
        out.push(online_update(&mut log_post, &log_lik.view(), &grid.weights));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn linspace_weights_sum_to_span() {
        let g = ThetaGrid::linspace(0.0, 1.0, 11).unwrap();
        assert_abs_diff_eq!(g.weights.sum(), 1.0, epsilon = 1e-12);
        assert_eq!(g.len(), 11);
    }

    #[test]
    fn kernel_prior_is_a_density() {
        // Roughly integrates to one over a wide 1D grid.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let z = Array2::from_shape_fn((400, 1), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let prior = kernel_prior(&z.view(), None, 20, 3).unwrap();
        let xs: Vec<f64> = (0..201).map(|i| -6.0 + 12.0 * i as f64 / 200.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| prior.density(&ndarray::array![*x].view()))
            .collect();
        let integral = crate::stats::trapezoid(&xs, &ys);
        assert!((0.9..=1.1).contains(&integral), "integral {integral}");
    }

    #[test]
    fn weighted_prior_shifts_mass() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let z = Array2::from_shape_fn((300, 1), |(i, _)| {
            let v: f64 = StandardNormal.sample(&mut rng);
            if i % 2 == 0 {
                v - 3.0
            } else {
                v + 3.0
            }
        });
        let weights: Vec<f64> = (0..300).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let prior = kernel_prior(&z.view(), Some(&weights), 20, 4).unwrap();
        let left = prior.density(&ndarray::array![-3.0].view());
        let right = prior.density(&ndarray::array![3.0].view());
        assert!(left > 10.0 * right, "left {left} right {right}");
    }

    #[test]
    fn online_update_normalizes_and_is_scale_invariant() {
        let grid = ThetaGrid::linspace(0.0, 1.0, 21).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let log_lik = Array1::from_shape_fn(21, |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let prior = Array1::from_elem(21, 1.0);
        let mut p1 = prior.mapv(|v: f64| v.ln());
        let mut p2 = prior.mapv(|v: f64| v.ln());
        let out1 = online_update(&mut p1, &log_lik.view(), &grid.weights);
        let shifted = log_lik.mapv(|v| v + 7.3);
        let out2 = online_update(&mut p2, &shifted.view(), &grid.weights);
        let total: f64 = out1.iter().zip(&grid.weights).map(|(v, w)| v * w).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-8);
        for (a, b) in out1.iter().zip(out2.iter()) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn theta_independent_likelihood_keeps_prior() {
        let grid = ThetaGrid::linspace(0.0, 1.0, 31).unwrap();
        let prior = Array1::from_shape_fn(31, |i| 1.0 + (i as f64 / 30.0));
        let mut norm_prior = prior.clone();
        assert!(normalize_on_grid(&mut norm_prior, &grid.weights));
        let mut logp = prior.mapv(|v: f64| v.ln());
        let flat = Array1::from_elem(31, -2.0);
        let mut last = Array1::zeros(31);
        for _ in 0..5 {
            last = online_update(&mut logp, &flat.view(), &grid.weights);
        }
        for (a, b) in last.iter().zip(norm_prior.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
        }
    }
}
