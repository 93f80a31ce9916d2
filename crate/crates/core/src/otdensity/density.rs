//! Density estimation by change of variables: push the samples onto a
//! tractable reference μ by direct-mode optimal transport, then
//! ρ(x) = μ(Q(x)) / |det ∇_y X(y)| at y = Q(x). Probe points ride the flow
//! as passive tracers; arbitrary-x evaluation afterwards goes through a
//! damped fixed-point inversion of the closed-form map.

use ndarray::{array, Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RawValue;
use crate::solver::{SolverConfig, SpaceSpec};
use crate::stats::MvNormal;
use crate::transport::{BarycenterModel, StageMap};
use crate::{Error, Result};

use super::ot::{solve_ot_with_tracers, OtMode};

/// Reference measure μ for density estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSpec {
    StandardNormal,
    /// Normal with the sample mean and covariance.
    MomentMatched,
}

/// Density value at a pre-registered probe.
#[derive(Debug, Clone)]
pub struct ProbeDensity {
    pub x: Array1<f64>,
    pub density: f64,
    /// Set when the Jacobian was near-singular or the probe did not settle.
    pub flagged: bool,
}

/// A fitted density estimate: the reference measure and the frozen
/// transport stage pushing the samples onto it.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    reference: MvNormal,
    stage: StageMap,
    probe_results: Vec<ProbeDensity>,
    converged: bool,
}

const SINGULAR_JACOBIAN_FLOOR: f64 = 1e-12;
const FIXED_POINT_DAMPING: f64 = 0.5;
const FIXED_POINT_TOL: f64 = 1e-8;
const FIXED_POINT_MAX_ITERS: usize = 200;

/// ρ at the barycenter parameterization: density of the pushed-forward
/// reference at x = X(y, 0), i.e. μ(y)/|det ∇X(y, 0)|.
pub(crate) fn stage_density_at_y(
    stage: &StageMap,
    reference: &MvNormal,
    y: &ArrayView2<f64>,
) -> Result<(Array1<f64>, Vec<bool>)> {
    let z0 = array![0.0];
    let jac = stage.jacobian_at(y, &z0.view())?;
    let d = y.ncols();
    let mut dens = Array1::zeros(y.nrows());
    let mut flags = vec![false; y.nrows()];
    for i in 0..y.nrows() {
        let block = nalgebra::DMatrix::from_fn(d, d, |a, b| jac[(i, a, b)]);
        let det = block.determinant().abs();
        if det < SINGULAR_JACOBIAN_FLOOR {
            flags[i] = true;
            dens[i] = 0.0;
        } else {
            dens[i] = reference.pdf(&y.row(i)) / det;
        }
    }
    Ok((dens, flags))
}

/// Damped fixed-point solve of X(y, 0) = x per row: y ← y + ω(x − X(y, 0)).
fn stage_fixed_point(stage: &StageMap, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Vec<bool>)> {
    let z0 = array![0.0];
    let mut y = x.to_owned();
    let mut settled = vec![false; x.nrows()];
    for _ in 0..FIXED_POINT_MAX_ITERS {
        let mapped = stage.invert_at(&y.view(), &z0.view())?;
        let mut all = true;
        for i in 0..x.nrows() {
            let mut err = 0.0_f64;
            let mut scale = 1.0_f64;
            for a in 0..x.ncols() {
                let r = x[(i, a)] - mapped[(i, a)];
                err = err.max(r.abs());
                scale = scale.max(x[(i, a)].abs());
                y[(i, a)] += FIXED_POINT_DAMPING * r;
            }
            settled[i] = err <= FIXED_POINT_TOL * scale;
            all &= settled[i];
        }
        if all {
            break;
        }
    }
    Ok((y, settled))
}

/// Estimate the density of `samples` by direct optimal transport onto
/// `reference`. Probe points must be supplied here, before the solve: they
/// travel with the flow as tracers. The reference draw is seeded from the
/// solver-config hash, so estimates are reproducible.
pub fn estimate_density(
    samples: &ArrayView2<f64>,
    reference: ReferenceSpec,
    g_spec: &SpaceSpec,
    config: &SolverConfig,
    probes: Option<&Array2<f64>>,
) -> Result<DensityEstimate> {
    let n = samples.nrows();
    let d = samples.ncols();
    if n < 2 {
        return Err(Error::InvalidInput("estimate_density: n >= 2 required".into()));
    }
    let mu = match reference {
        ReferenceSpec::StandardNormal => MvNormal::standard(d),
        ReferenceSpec::MomentMatched => MvNormal::moment_matched(samples)?,
    };
    let hash = crate::serialize::config_hash(config)?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(crate::serialize::derive_seed(&format!("density-reference-{hash}"), config.seed));
    let ref_samples = mu.sample(n, &mut rng);

    let (ot, tracer_final) = solve_ot_with_tracers(
        samples,
        &ref_samples.view(),
        g_spec,
        config,
        OtMode::Direct,
        probes,
    )?;

    let mut probe_results = Vec::new();
    if let (Some(p), Some(landed)) = (probes, tracer_final) {
        let (dens, flags) = stage_density_at_y(&ot.stage, &mu, &landed.view())?;
        for i in 0..p.nrows() {
            probe_results.push(ProbeDensity {
                x: p.row(i).to_owned(),
                density: dens[i],
                flagged: flags[i],
            });
        }
    }
    Ok(DensityEstimate { reference: mu, stage: ot.stage, probe_results, converged: ot.converged })
}

impl DensityEstimate {
    pub fn reference(&self) -> &MvNormal {
        &self.reference
    }

    pub fn stage(&self) -> &StageMap {
        &self.stage
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Densities at the probes registered before the solve.
    pub fn probe_densities(&self) -> &[ProbeDensity] {
        &self.probe_results
    }

    /// Tracer-path evaluation is only available for probes registered
    /// before the solve; asking afterwards violates the tracer contract.
    pub fn density_at_new_probe(&self, _x: &ArrayView1<f64>) -> Result<f64> {
        Err(Error::TracerContract)
    }

    /// Arbitrary-point evaluation through the damped fixed-point inversion
    /// of the closed-form map (the sanctioned alternative to tracers).
    /// Returns densities and per-point flags (fixed point not settled or
    /// singular Jacobian).
    pub fn density_by_inversion(&self, xs: &ArrayView2<f64>) -> Result<(Array1<f64>, Vec<bool>)> {
        let (y, settled) = stage_fixed_point(&self.stage, xs)?;
        let (dens, mut flags) = stage_density_at_y(&self.stage, &self.reference, &y.view())?;
        for (f, s) in flags.iter_mut().zip(settled) {
            *f |= !s;
        }
        Ok((dens, flags))
    }
}

/// Conditional density estimation through the barycenter: estimate μ(y)
/// once from the final barycenter samples, then
/// ρ(X(y, z) | z) = μ(y) / |det ∇_y X(y, z)|.
#[derive(Debug, Clone)]
pub struct ConditionalDensity {
    model: BarycenterModel,
    mu: DensityEstimate,
}

impl ConditionalDensity {
    /// Fit the barycenter-density factor μ̂ on `model.y_final`.
    pub fn fit(model: &BarycenterModel, g_spec: &SpaceSpec, config: &SolverConfig) -> Result<Self> {
        let mu = estimate_density(
            &model.y_final.view(),
            ReferenceSpec::MomentMatched,
            g_spec,
            config,
            None,
        )?;
        Ok(Self { model: model.clone(), mu })
    }

    pub fn model(&self) -> &BarycenterModel {
        &self.model
    }

    pub fn mu(&self) -> &DensityEstimate {
        &self.mu
    }

    /// Parameterized evaluation: caller supplies barycenter points y and
    /// receives the pairs (X(y, z*), ρ(X(y, z*) | z*)).
    pub fn evaluate_y_parameterized(
        &self,
        y: &ArrayView2<f64>,
        z_star: &[RawValue],
    ) -> Result<(Array2<f64>, Array1<f64>, Vec<bool>)> {
        let z_emb = self.model.embed(z_star)?;
        let (x, dets) = self.model.push_back_with_jacobian(y, &z_emb.view())?;
        let (mu_vals, mu_flags) = self.mu.density_by_inversion(y)?;
        let mut dens = Array1::zeros(y.nrows());
        let mut flags = mu_flags;
        for i in 0..y.nrows() {
            let det = dets[i].abs();
            if det < SINGULAR_JACOBIAN_FLOOR {
                flags[i] = true;
            } else {
                dens[i] = mu_vals[i] / det;
            }
        }
        Ok((x, dens, flags))
    }

    /// Direct evaluation of ρ(x | z*): solves X(y, z*) = x per point by the
    /// damped fixed-point iteration, then applies the change of variables.
    pub fn evaluate_at(
        &self,
        xs: &ArrayView2<f64>,
        z_star: &[RawValue],
    ) -> Result<(Array1<f64>, Vec<bool>)> {
        let z_emb = self.model.embed(z_star)?;
        let mut y = xs.to_owned();
        let mut settled = vec![false; xs.nrows()];
        for _ in 0..FIXED_POINT_MAX_ITERS {
            let mapped = self.model.push_back_at(&y.view(), &z_emb.view())?;
            let mut all = true;
            for i in 0..xs.nrows() {
                let mut err = 0.0_f64;
                let mut scale = 1.0_f64;
                for a in 0..xs.ncols() {
                    let r = xs[(i, a)] - mapped[(i, a)];
                    err = err.max(r.abs());
                    scale = scale.max(xs[(i, a)].abs());
                    y[(i, a)] += FIXED_POINT_DAMPING * r;
                }
                settled[i] = err <= FIXED_POINT_TOL * scale;
                all &= settled[i];
            }
            if all {
                break;
            }
        }
        let (_, dets) = self.model.push_back_with_jacobian(&y.view(), &z_emb.view())?;
        let (mu_vals, mu_flags) = self.mu.density_by_inversion(&y.view())?;
        let mut dens = Array1::zeros(xs.nrows());
        let mut flags = mu_flags;
        for i in 0..xs.nrows() {
            flags[i] |= !settled[i];
            let det = dets[i].abs();
            if det < SINGULAR_JACOBIAN_FLOOR || flags[i] {
                flags[i] = true;
                dens[i] = 0.0;
            } else {
                dens[i] = mu_vals[i] / det;
            }
        }
        Ok((dens, flags))
    }
}

/// The per-z route: simulate ρ(·|z*) and run regular density estimation on
/// the simulated samples, with the probes registered up front.
pub fn conditional_density_per_z(
    model: &BarycenterModel,
    z_star: &[RawValue],
    x_probes: &Array2<f64>,
    g_spec: &SpaceSpec,
    config: &SolverConfig,
) -> Result<Vec<ProbeDensity>> {
    let sim = model.simulate_conditional(z_star, None)?;
    let est = estimate_density(
        &sim.samples.view(),
        ReferenceSpec::MomentMatched,
        g_spec,
        config,
        Some(x_probes),
    )?;
    Ok(est.probe_densities().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{orthogonalize, OrthoOptions};
    use crate::kernelspace::KernelSpace;
    use crate::transport::FactorSide;
    use approx::assert_abs_diff_eq;
    
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_samples(n: usize, mu: f64, sd: f64, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 1), |_| {
            let w: f64 = StandardNormal.sample(&mut rng);
            mu + sd * w
        })
    }

    /// Hand-built affine stage: quadratic G in 1D with a binary f side.
    fn affine_stage(sigma: f64, lambda: f64, seed: u64) -> StageMap {
        let y_pts = normal_samples(60, 0.0, 1.0, seed);
        let g_space = KernelSpace::quadratic(1, false);
        let g_feat = g_space.eval(&y_pts.view()).unwrap();
        let g_basis = orthogonalize(&g_feat.view(), &OrthoOptions::default()).unwrap();
        let ny = g_basis.rank();
        let mut b = Array2::zeros((ny, 1));
        b[(0, 0)] = 1.0;
        StageMap {
            f_side: FactorSide::Binary { at_zero: array![0.04], at_one: array![-0.04] },
            g_space,
            g_basis,
            b_vecs: b,
            sigmas: array![sigma],
            lambda,
        }
    }

    #[test]
    fn zero_sigma_density_is_reference_exactly() {
        let stage = affine_stage(0.0, 1.0, 1);
        let mu = MvNormal::standard(1);
        let y = normal_samples(20, 0.0, 1.0, 2);
        let (dens, flags) = stage_density_at_y(&stage, &mu, &y.view()).unwrap();
        for i in 0..20 {
            assert!(!flags[i]);
            assert_abs_diff_eq!(dens[i], mu.pdf(&y.row(i)), epsilon = 1e-15);
        }
    }

    #[test]
    fn affine_stage_matches_exact_pushforward() {
        // With quadratic G the map X(·, 0) is affine: the change-of-variables
        // density must equal the exact affine-pushforward density.
        let stage = affine_stage(0.15, 2.0, 3);
        let mu = MvNormal::standard(1);
        let z0 = array![0.0];
        // Recover the affine coefficients from two evaluations.
        let probe = array![[0.0], [1.0]];
        let mapped = stage.invert_at(&probe.view(), &z0.view()).unwrap();
        let b0 = mapped[(0, 0)];
        let a = mapped[(1, 0)] - b0;
        assert!(a > 0.0);
        let y = normal_samples(30, 0.0, 1.0, 4);
        let (dens, flags) = stage_density_at_y(&stage, &mu, &y.view()).unwrap();
        for i in 0..30 {
            assert!(!flags[i]);
            let exact = mu.pdf(&y.row(i)) / a;
            assert_abs_diff_eq!(dens[i], exact, epsilon = 1e-6);
        }
        // And the fixed-point inversion solves the affine equation exactly.
        let xs = stage.invert_at(&y.view(), &z0.view()).unwrap();
        let (yy, settled) = stage_fixed_point(&stage, &xs.view()).unwrap();
        for i in 0..30 {
            assert!(settled[i]);
            assert_abs_diff_eq!(yy[(i, 0)], y[(i, 0)], epsilon = 1e-6);
        }
    }

    #[test]
    fn standard_normal_log_density_is_recovered() {
        let samples = normal_samples(1200, 0.0, 1.0, 5);
        let probes = Array2::from_shape_vec((1, 1), vec![0.0]).unwrap();
        let config = SolverConfig { seed: 5, max_iters: 6000, ..Default::default() };
        let est = estimate_density(
            &samples.view(),
            ReferenceSpec::MomentMatched,
            &SpaceSpec::quadratic(),
            &config,
            Some(&probes),
        )
        .unwrap();
        let p = &est.probe_densities()[0];
        assert!(!p.flagged);
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!(
            (p.density.ln() - expect).abs() < 0.15,
            "log density {} vs {expect}",
            p.density.ln()
        );
    }

    #[test]
    fn density_integrates_to_one() {
        let samples = normal_samples(1000, 0.5, 1.2, 6);
        let grid: Vec<f64> = (0..81).map(|i| -4.5 + 9.0 * i as f64 / 80.0).collect();
        let probes = Array2::from_shape_vec((81, 1), grid.clone()).unwrap();
        let config = SolverConfig { seed: 6, max_iters: 6000, ..Default::default() };
        let est = estimate_density(
            &samples.view(),
            ReferenceSpec::MomentMatched,
            &SpaceSpec::quadratic(),
            &config,
            Some(&probes),
        )
        .unwrap();
        let dens: Vec<f64> = est.probe_densities().iter().map(|p| p.density).collect();
        let integral = crate::stats::trapezoid(&grid, &dens);
        assert!((0.9..=1.1).contains(&integral), "integral {integral}");
    }

    #[test]
    fn tracer_contract_is_enforced() {
        let samples = normal_samples(100, 0.0, 1.0, 7);
        let config = SolverConfig { seed: 7, max_iters: 2000, ..Default::default() };
        let est = estimate_density(
            &samples.view(),
            ReferenceSpec::MomentMatched,
            &SpaceSpec::quadratic(),
            &config,
            None,
        )
        .unwrap();
        let x = array![0.3];
        assert!(matches!(est.density_at_new_probe(&x.view()), Err(Error::TracerContract)));
    }

    #[test]
    fn inversion_route_agrees_with_tracer_route() {
        let samples = normal_samples(800, 0.0, 1.0, 8);
        let grid: Vec<f64> = vec![-1.0, 0.0, 1.0];
        let probes = Array2::from_shape_vec((3, 1), grid).unwrap();
        let config = SolverConfig { seed: 8, max_iters: 6000, ..Default::default() };
        let est = estimate_density(
            &samples.view(),
            ReferenceSpec::MomentMatched,
            &SpaceSpec::quadratic(),
            &config,
            Some(&probes),
        )
        .unwrap();
        let (by_inv, flags) = est.density_by_inversion(&probes.view()).unwrap();
        for (i, p) in est.probe_densities().iter().enumerate() {
            assert!(!flags[i]);
            let rel = (by_inv[i] - p.density).abs() / p.density.max(1e-12);
            assert!(rel < 0.05, "probe {i}: tracer {} vs inversion {}", p.density, by_inv[i]);
        }
    }
}
