//! Monge optimal transport by reduction to a barycenter problem over a
//! binary covariate. With z ∈ {0, 1} only one zero-mean unit-norm function
//! of z exists, so Q_z is a fixed single column and the adversarial
//! maximization in z-space disappears.

use ndarray::{array, Array2, ArrayView2};

use crate::solver::{run_flow, FlowProblem, IterRecord, SolverConfig, SpaceSpec, TracerInput, ZFeatures};
use crate::transport::StageMap;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtMode {
    /// Both sides flow to the common barycenter; endpoint maps come from
    /// the weighted pre-image identity.
    Symmetric,
    /// The target rows are pinned at their data values, so the source rows
    /// are pushed directly onto the target distribution.
    Direct,
}

/// Solved transport problem between two sample sets.
#[derive(Debug, Clone)]
pub struct OTResult {
    /// Q(x_i⁰): where each source sample lands in the target distribution.
    pub map_on_source: Array2<f64>,
    /// Q⁻¹(x_j¹): source pre-image of each target sample.
    pub inverse_on_target: Array2<f64>,
    pub stage: StageMap,
    pub mode: OtMode,
    pub converged: bool,
    /// Final pooled positions (diagnostics: the independence criterion ran
    /// on these).
    pub y: Array2<f64>,
    pub records: Vec<IterRecord>,
}

/// Solve the Monge OT problem from `source` to `target` samples.
pub fn solve_ot(
    source: &ArrayView2<f64>,
    target: &ArrayView2<f64>,
    g_spec: &SpaceSpec,
    config: &SolverConfig,
    mode: OtMode,
) -> Result<OTResult> {
    solve_ot_with_tracers(source, target, g_spec, config, mode, None).map(|(r, _)| r)
}

/// Like [`solve_ot`], carrying optional probe points through the flow as
/// passive tracers on the source side; returns their final positions
/// Q(probe).
pub fn solve_ot_with_tracers(
    source: &ArrayView2<f64>,
    target: &ArrayView2<f64>,
    g_spec: &SpaceSpec,
    config: &SolverConfig,
    mode: OtMode,
    probes: Option<&Array2<f64>>,
) -> Result<(OTResult, Option<Array2<f64>>)> {
    let n0 = source.nrows();
    let n1 = target.nrows();
    let d = source.ncols();
    if target.ncols() != d {
        return Err(Error::shape("solve_ot", d, target.ncols()));
    }
    if n0 < 2 || n1 < 2 {
        return Err(Error::InvalidInput("solve_ot: both sides need n >= 2".into()));
    }
    let mut pooled = Array2::zeros((n0 + n1, d));
    pooled.slice_mut(ndarray::s![..n0, ..]).assign(source);
    pooled.slice_mut(ndarray::s![n0.., ..]).assign(target);
    let labels: Vec<bool> = (0..n0 + n1).map(|i| i >= n0).collect();
    let z = ZFeatures::binary(&labels)?;

    let tracers = match probes {
        Some(p) => {
            if p.ncols() != d {
                return Err(Error::shape("solve_ot probes", d, p.ncols()));
            }
            let q_rows = z.rows_at_labels(&vec![false; p.nrows()])?;
            Some(TracerInput { anchors: p.clone(), q_rows })
        }
        None => None,
    };
    let free = match mode {
        OtMode::Symmetric => None,
        OtMode::Direct => Some(labels.iter().map(|l| !l).collect::<Vec<bool>>()),
    };

    let res = run_flow(FlowProblem {
        x: pooled.view(),
        z,
        g_spec,
        config,
        free,
        tracers,
        g_seed: crate::serialize::derive_seed("ot-g-space", config.seed),
        z_build_time: std::time::Duration::ZERO,
    })?;

    let stage = res.stage_maps.last().expect("stage map present").clone();
    let t_source = res.y.slice(ndarray::s![..n0, ..]).to_owned();
    let t_target = res.y.slice(ndarray::s![n0.., ..]).to_owned();
    let (map_on_source, inverse_on_target) = match mode {
        OtMode::Symmetric => {
            // Every barycenter point is the weighted c-barycenter of its two
            // pre-images: with one pre-image known, the other follows.
            let r01 = n0 as f64 / n1 as f64;
            let r10 = n1 as f64 / n0 as f64;
            let q = t_source.mapv(|v| v) * (1.0 + r01) - &(source.to_owned() * r01);
            let q_inv = t_target.mapv(|v| v) * (1.0 + r10) - &(target.to_owned() * r10);
            (q, q_inv)
        }
        OtMode::Direct => {
            // T(·,1) = identity, so the final source rows are Q(x⁰) and the
            // source pre-image of a target point is the closed-form X(·, 0).
            let z0 = array![0.0];
            let q_inv = stage.invert_at(target, &z0.view())?;
            (t_source, q_inv)
        }
    };
    let tracer_final = res.tracer_positions.clone();
    Ok((
        OTResult {
            map_on_source,
            inverse_on_target,
            stage,
            mode,
            converged: res.converged,
            y: res.y,
            records: res.records,
        },
        tracer_final,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form 1D Gaussian-to-Gaussian OT map, the independent oracle:
    /// x ↦ μ₁ + (σ₁/σ₀)(x − μ₀).
    fn gaussian_ot_map_1d(mu0: f64, sd0: f64, mu1: f64, sd1: f64, x: f64) -> f64 {
        mu1 + (sd1 / sd0) * (x - mu0)
    }
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_samples(n: usize, mu: f64, sd: f64, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 1), |_| {
            let w: f64 = StandardNormal.sample(&mut rng);
            mu + sd * w
        })
    }

    fn quick_config(seed: u64) -> SolverConfig {
        SolverConfig { seed, max_iters: 6000, ..Default::default() }
    }

    #[test]
    fn identical_sides_give_identity_map() {
        let s = normal_samples(400, 0.0, 1.0, 1);
        let res = solve_ot(&s.view(), &s.view(), &SpaceSpec::quadratic(), &quick_config(1), OtMode::Symmetric)
            .unwrap();
        assert!(res.converged);
        let var = crate::stats::variance_trace(&s.view());
        let dev: f64 = res
            .map_on_source
            .iter()
            .zip(s.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / s.nrows() as f64;
        assert!(dev < 0.01 * var, "identity deviation {dev} vs var {var}");
    }

    #[test]
    fn direct_mode_pins_target_rows() {
        let s = normal_samples(200, 0.0, 1.0, 2);
        let t = normal_samples(250, 2.0, 1.5, 3);
        let res =
            solve_ot(&s.view(), &t.view(), &SpaceSpec::quadratic(), &quick_config(2), OtMode::Direct).unwrap();
        for i in 0..t.nrows() {
            assert_eq!(res.y[(200 + i, 0)], t[(i, 0)], "target row {i} moved");
        }
    }

    #[test]
    fn symmetric_equal_counts_formula() {
        // n0 = n1 → Q(x) = 2T(x,0) − x.
        let s = normal_samples(150, 0.0, 1.0, 4);
        let t = normal_samples(150, 1.0, 1.0, 5);
        let res = solve_ot(&s.view(), &t.view(), &SpaceSpec::quadratic(), &quick_config(3), OtMode::Symmetric)
            .unwrap();
        for i in 0..s.nrows() {
            let expect = 2.0 * res.y[(i, 0)] - s[(i, 0)];
            approx::assert_abs_diff_eq!(res.map_on_source[(i, 0)], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_pair_matches_closed_form_map() {
        // Fast version of the acceptance check at smaller n.
        let s = normal_samples(600, 0.0, 1.0, 6);
        let t = normal_samples(600, 2.0, 2.0, 7);
        let res = solve_ot(&s.view(), &t.view(), &SpaceSpec::quadratic(), &quick_config(4), OtMode::Symmetric)
            .unwrap();
        assert!(res.converged);
        let mut sq = 0.0;
        for i in 0..s.nrows() {
            let expect = gaussian_ot_map_1d(0.0, 1.0, 2.0, 2.0, s[(i, 0)]);
            sq += (res.map_on_source[(i, 0)] - expect).powi(2);
        }
        let rmse = (sq / s.nrows() as f64).sqrt() / 2.0; // target std units
        assert!(rmse < 0.3, "rmse {rmse}");
    }

    #[test]
    fn tracers_follow_the_source_map() {
        let s = normal_samples(300, 0.0, 1.0, 8);
        let t = normal_samples(300, 1.5, 1.0, 9);
        let probes = s.slice(ndarray::s![0..4, ..]).to_owned();
        let (res, moved) = solve_ot_with_tracers(
            &s.view(),
            &t.view(),
            &SpaceSpec::quadratic(),
            &quick_config(5),
            OtMode::Direct,
            Some(&probes),
        )
        .unwrap();
        let moved = moved.unwrap();
        for i in 0..4 {
            let dy = (moved[(i, 0)] - res.map_on_source[(i, 0)]).abs();
            assert!(dy < 1e-8, "tracer {i} off by {dy}");
        }
    }
}
