//! Scaling benchmark: times the once-per-run, per-stage and per-iteration
//! buckets of the flow over sweeps in the sample count and the outcome and
//! covariate dimensions, on the synthetic z-dependent isotropic Gaussian
//! law. Kernel-center counts and orthogonalization ranks are pinned across
//! a sweep so the per-iteration bucket isolates the O(n) work.

use serde::{Deserialize, Serialize};

use crate::data::bench_gauss;
use crate::kernelspace::SpaceKind;
use crate::solver::{run, SolverConfig, SpaceSpec};
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub d_x_list: Vec<usize>,
    pub d_z_list: Vec<usize>,
    /// Sample count used in the dimension sweeps.
    pub base_n: usize,
    /// Trials per sweep point; the reported value is the median.
    pub trials: usize,
    /// Iteration cap per trial: per-iteration cost is measured, not
    /// convergence.
    pub max_iters: usize,
    /// Kernel centers pinned across the sweep (m = min(⌊√n⌋, m_max)).
    pub m_max: usize,
    /// Rank caps pinning n_z and n_y across the sweep.
    pub f_rank: usize,
    pub g_rank: usize,
    /// Use kernel functions for G (the alternative is quadratic, same
    /// scaling with smaller constants).
    pub kernel_g: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_list: vec![2000, 4000, 8000, 16000],
            d_x_list: vec![1, 2, 4, 8],
            d_z_list: vec![1, 2, 4, 8],
            base_n: 2000,
            trials: 10,
            max_iters: 150,
            m_max: 40,
            f_rank: 16,
            g_rank: 24,
            kernel_g: true,
            seed: 0,
        }
    }
}

/// Median timings at one sweep point, milliseconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub once_per_run_ms: f64,
    pub per_stage_ms: f64,
    pub per_iteration_ms: f64,
    pub total_ms: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub n_sweep: Vec<SweepPoint>,
    pub d_x_sweep: Vec<SweepPoint>,
    pub d_z_sweep: Vec<SweepPoint>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Time one sweep point: median over trials of the three buckets.
pub fn run_point(cfg: &BenchConfig, n: usize, d_x: usize, d_z: usize) -> Result<SweepPoint> {
    let f_spec = SpaceSpec {
        kind: SpaceKind::Kernel,
        m_max: cfg.m_max,
        gamma: 1.0,
        energy_fraction: Some(1.0),
        max_rank: Some(cfg.f_rank),
        truncated: false,
    };
    let g_spec = SpaceSpec {
        kind: if cfg.kernel_g { SpaceKind::Kernel } else { SpaceKind::Quadratic },
        m_max: cfg.m_max,
        gamma: 1.0,
        energy_fraction: Some(1.0),
        max_rank: Some(cfg.g_rank),
        truncated: false,
    };
    let mut once = Vec::new();
    let mut stage = Vec::new();
    let mut iter = Vec::new();
    let mut total = Vec::new();
    let mut iters = Vec::new();
    for t in 0..cfg.trials.max(1) {
        let seed = cfg.seed.wrapping_add(t as u64);
        let ds = bench_gauss(n, d_x, d_z, seed)?;
        let solver = SolverConfig { max_iters: cfg.max_iters, seed, ..Default::default() };
        let res = run(&ds, &f_spec, &g_spec, &solver)?;
        once.push(res.timing.once_per_run.as_secs_f64() * 1e3);
        stage.push(res.timing.mean_stage().as_secs_f64() * 1e3);
        iter.push(res.timing.mean_iteration().as_secs_f64() * 1e3);
        total.push(res.timing.total().as_secs_f64() * 1e3);
        iters.push(res.timing.per_iteration.len() as f64);
    }
    Ok(SweepPoint {
        n,
        d_x,
        d_z,
        once_per_run_ms: median(once),
        per_stage_ms: median(stage),
        per_iteration_ms: median(iter),
        total_ms: median(total),
        iterations: median(iters) as usize,
    })
}

/// Full sweep: n at d_x = d_z = 1, then d_x and d_z at n = base_n with the
/// other dimension fixed at 1.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut n_sweep = Vec::new();
    for &n in &cfg.n_list {
        n_sweep.push(run_point(cfg, n, 1, 1)?);
    }
    let mut d_x_sweep = Vec::new();
    for &d in &cfg.d_x_list {
        d_x_sweep.push(run_point(cfg, cfg.base_n, d, 1)?);
    }
    let mut d_z_sweep = Vec::new();
    for &d in &cfg.d_z_list {
        d_z_sweep.push(run_point(cfg, cfg.base_n, 1, d)?);
    }
    Ok(BenchReport { config: cfg.clone(), n_sweep, d_x_sweep, d_z_sweep })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_single_trial_produces_all_buckets() {
        let cfg = BenchConfig {
            n_list: vec![400],
            d_x_list: vec![],
            d_z_list: vec![],
            base_n: 400,
            trials: 1,
            max_iters: 20,
            ..Default::default()
        };
        let report = run_bench(&cfg).unwrap();
        assert_eq!(report.n_sweep.len(), 1);
        let p = &report.n_sweep[0];
        assert!(p.once_per_run_ms > 0.0);
        assert!(p.per_stage_ms > 0.0);
        assert!(p.per_iteration_ms > 0.0);
        assert!(p.total_ms >= p.once_per_run_ms);
        assert!(p.iterations > 0 && p.iterations <= 20);
        // Valid JSON with the four buckets present.
        let json = serde_json::to_value(&report).unwrap();
        let point = &json["n_sweep"][0];
        for key in ["once_per_run_ms", "per_stage_ms", "per_iteration_ms", "total_ms"] {
            assert!(point.get(key).is_some(), "missing {key}");
        }
    }
}
