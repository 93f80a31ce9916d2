//! The gradient-descent flow over the sample positions y: triplet refresh,
//! adaptive λ with freeze semantics, Armijo steps, δ-triggered stage
//! restarts of the frozen inner product, passive tracer points, and the
//! two-part termination criterion (all σ_k below σ* and a small mean
//! objective gradient).

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2};

use crate::basis::{orthogonalize, orthogonalize_sparse, OrthoBasis, OrthoOptions};
use crate::data::Dataset;
use crate::kernelspace::{build_kernel_space, Center, KernelSpace, SpaceKind};
use crate::serialize::{derive_seed, matrix_content_hash};
use crate::solver::config::{SolverConfig, SpaceSpec, StagePairSpec};
use crate::solver::line_search::line_search;
use crate::solver::penalty::{
    assemble_a, objective, penalty_fields, penalty_value, topk, PenaltyTriplets,
};
use crate::transport::{BarycenterModel, FactorSide, Provenance, StageMap};
use crate::{Error, Result};

/// Wall-clock buckets matching the complexity analysis: work done once per
/// run (z-side construction, G space build), once per stage (Q_y refresh),
/// and per descent iteration.
#[derive(Debug, Clone, Default)]
pub struct Timing {
    pub once_per_run: Duration,
    pub per_stage: Vec<Duration>,
    pub per_iteration: Vec<Duration>,
}

impl Timing {
    pub fn mean_iteration(&self) -> Duration {
        if self.per_iteration.is_empty() {
            Duration::ZERO
        } else {
            self.per_iteration.iter().sum::<Duration>() / self.per_iteration.len() as u32
        }
    }

    pub fn mean_stage(&self) -> Duration {
        if self.per_stage.is_empty() {
            Duration::ZERO
        } else {
            self.per_stage.iter().sum::<Duration>() / self.per_stage.len() as u32
        }
    }

    pub fn total(&self) -> Duration {
        self.once_per_run
            + self.per_stage.iter().sum::<Duration>()
            + self.per_iteration.iter().sum::<Duration>()
    }
}

/// One line of the machine-parseable progress log.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iter: usize,
    pub stage: usize,
    pub objective: f64,
    pub max_sigma: f64,
    pub lambda: f64,
    pub eta: f64,
    pub mean_grad_sq: f64,
    /// Objective after the accepted step, under the same λ as `objective`.
    pub objective_after: f64,
}

/// The z side of a flow: the fixed orthogonal features at the samples plus
/// what a frozen stage needs to evaluate factors at new covariate values.
#[derive(Debug, Clone)]
pub struct ZFeatures {
    /// n × n_z orthogonal features at the training samples.
    pub q: Array2<f64>,
    side: ZSide,
}

#[derive(Debug, Clone)]
enum ZSide {
    Kernel { space: KernelSpace, basis: OrthoBasis },
    Binary { at_zero: f64, at_one: f64 },
}

impl ZFeatures {
    /// Build the z features from a covariate matrix: freeze zero-mean
    /// columns, orthogonalize, and evaluate Q_z at the samples. A feature
    /// matrix that vanishes after mean removal (constant covariate) yields
    /// rank 0: the penalty is absent and the flow stays at y = x.
    pub fn from_space(
        mut space: KernelSpace,
        z: &ArrayView2<f64>,
        opts: &OrthoOptions,
        seed: u64,
    ) -> Result<Self> {
        let n = z.nrows();
        if space.is_truncated() {
            let csr = space.eval_sparse(z)?;
            let means = csr.column_means();
            if space.is_zero_mean() {
                space.set_frozen_means(means.to_vec());
            }
            let mean_arg = space.is_zero_mean().then_some(means.view());
            match orthogonalize_sparse(&csr, mean_arg.as_ref(), opts, seed) {
                Ok(mut basis) => {
                    basis.set_reference_hash(matrix_content_hash(z));
                    // Q = A·B − 1·(μᵀB)
                    let b = basis.b();
                    let mut q = Array2::zeros((n, basis.rank()));
                    for k in 0..basis.rank() {
                        let col: Vec<f64> = (0..b.nrows()).map(|j| b[(j, k)]).collect();
                        let av = csr.matvec(&col);
                        let shift: f64 = if space.is_zero_mean() {
                            means.iter().zip(&col).map(|(m, c)| m * c).sum()
                        } else {
                            0.0
                        };
                        for i in 0..n {
                            q[(i, k)] = av[i] - shift;
                        }
                    }
                    Ok(Self { q, side: ZSide::Kernel { space, basis } })
                }
                Err(Error::Numerical(_)) => Ok(Self::degenerate(space, n)),
                Err(e) => Err(e),
            }
        } else {
            space.freeze_means(z)?;
            let features = space.eval(z)?;
            match orthogonalize(&features.view(), opts) {
                Ok(mut basis) => {
                    basis.set_reference_hash(matrix_content_hash(z));
                    let q = basis.apply(&features.view())?;
                    Ok(Self { q, side: ZSide::Kernel { space, basis } })
                }
                Err(Error::Numerical(_)) => Ok(Self::degenerate(space, n)),
                Err(e) => Err(e),
            }
        }
    }

    fn degenerate(space: KernelSpace, n: usize) -> Self {
        let basis = OrthoBasis::empty(space.n_columns());
        Self { q: Array2::zeros((n, 0)), side: ZSide::Kernel { space, basis } }
    }

    /// The fixed zero-mean, unit-norm function of a binary covariate:
    /// f ∝ 1/n₀ on the source (label 0) and −1/n₁ on the target (label 1).
    pub fn binary(labels: &[bool]) -> Result<Self> {
        let n = labels.len();
        let n1 = labels.iter().filter(|l| **l).count();
        let n0 = n - n1;
        if n0 < 1 || n1 < 1 {
            return Err(Error::InvalidInput("binary covariate needs samples on both sides".into()));
        }
        let norm = (1.0 / n0 as f64 + 1.0 / n1 as f64).sqrt();
        let at_zero = (1.0 / n0 as f64) / norm;
        let at_one = -(1.0 / n1 as f64) / norm;
        let mut q = Array2::zeros((n, 1));
        for (i, l) in labels.iter().enumerate() {
            q[(i, 0)] = if *l { at_one } else { at_zero };
        }
        Ok(Self { q, side: ZSide::Binary { at_zero, at_one } })
    }

    pub fn rank(&self) -> usize {
        self.q.ncols()
    }

    /// Q_z rows at new embedded covariate values (tracer registration).
    pub fn rows_at(&self, z_emb: &ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.side {
            ZSide::Kernel { space, basis } => {
                let features = space.eval(z_emb)?;
                basis.apply(&features.view())
            }
            ZSide::Binary { .. } => Err(Error::InvalidInput(
                "binary z side: use rows_at_labels for tracer rows".into(),
            )),
        }
    }

    /// Q_z rows for tracers on a binary covariate.
    pub fn rows_at_labels(&self, labels: &[bool]) -> Result<Array2<f64>> {
        match &self.side {
            ZSide::Binary { at_zero, at_one } => {
                let mut q = Array2::zeros((labels.len(), 1));
                for (i, l) in labels.iter().enumerate() {
                    q[(i, 0)] = if *l { *at_one } else { *at_zero };
                }
                Ok(q)
            }
            ZSide::Kernel { .. } => {
                Err(Error::InvalidInput("kernel z side: use rows_at for tracer rows".into()))
            }
        }
    }

    fn make_factor_side(&self, a_vecs: &Array2<f64>) -> FactorSide {
        match &self.side {
            ZSide::Kernel { space, basis } => FactorSide::Kernel {
                space: space.clone(),
                basis: basis.clone(),
                a_vecs: a_vecs.clone(),
            },
            ZSide::Binary { at_zero, at_one } => {
                let k = a_vecs.ncols();
                let mut v0 = Array1::zeros(k);
                let mut v1 = Array1::zeros(k);
                for kk in 0..k {
                    v0[kk] = a_vecs[(0, kk)] * at_zero;
                    v1[kk] = a_vecs[(0, kk)] * at_one;
                }
                FactorSide::Binary { at_zero: v0, at_one: v1 }
            }
        }
    }
}

/// Passive probes carried by the shared gradient field: each has its own
/// cost anchor and fixed Q_z row, and never enters A, λ, or the trajectory.
#[derive(Debug, Clone)]
pub struct TracerInput {
    pub anchors: Array2<f64>,
    pub q_rows: Array2<f64>,
}

/// A fully specified flow problem.
pub struct FlowProblem<'a> {
    pub x: ArrayView2<'a, f64>,
    pub z: ZFeatures,
    pub g_spec: &'a SpaceSpec,
    pub config: &'a SolverConfig,
    /// Rows free to move; `None` moves every row (direct-mode OT pins the
    /// target rows).
    pub free: Option<Vec<bool>>,
    pub tracers: Option<TracerInput>,
    pub g_seed: u64,
    /// Time spent building the z side, folded into the once-per-run bucket.
    pub z_build_time: Duration,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub y: Array2<f64>,
    /// One StageMap per internal stage; the last one is frozen at the final
    /// y and is the operative map for inversion.
    pub stage_maps: Vec<StageMap>,
    pub converged: bool,
    pub records: Vec<IterRecord>,
    pub tracer_positions: Option<Array2<f64>>,
    pub timing: Timing,
}

fn spread_around_mean(y: &Array2<f64>) -> f64 {
    crate::stats::variance_trace(&y.view()) * y.nrows() as f64
}

fn masked_variance(x: &ArrayView2<f64>, free: Option<&[bool]>) -> f64 {
    match free {
        None => crate::stats::variance_trace(x),
        Some(mask) => {
            let rows: Vec<usize> = (0..x.nrows()).filter(|i| mask[*i]).collect();
            let mut sel = Array2::zeros((rows.len(), x.ncols()));
            for (r, &i) in rows.iter().enumerate() {
                sel.row_mut(r).assign(&x.row(i));
            }
            crate::stats::variance_trace(&sel.view())
        }
    }
}

/// Run the gradient-descent flow.
pub fn run_flow(problem: FlowProblem) -> Result<RunResult> {
    let config = problem.config;
    config.validate()?;
    problem.g_spec.validate()?;
    let x = problem.x;
    let n = x.nrows();
    let d = x.ncols();
    if n < 2 {
        return Err(Error::InvalidInput("n >= 2 required".into()));
    }
    if problem.z.q.nrows() != n {
        return Err(Error::shape("run_flow z features", n, problem.z.q.nrows()));
    }
    if let Some(mask) = &problem.free {
        if mask.len() != n {
            return Err(Error::shape("run_flow mask", n, mask.len()));
        }
    }
    let free = problem.free.as_deref();
    let n_free = free.map_or(n, |m| m.iter().filter(|b| **b).count());
    if n_free == 0 {
        return Err(Error::InvalidInput("no free rows to optimize".into()));
    }

    let mut timing = Timing { once_per_run: problem.z_build_time, ..Default::default() };

    // G space is fixed for the whole run: centers and bandwidths come from
    // the run's input positions.
    let t0 = Instant::now();
    let g_space = match problem.g_spec.kind {
        SpaceKind::Kernel => build_kernel_space(
            &x,
            problem.g_spec.m_max,
            problem.g_spec.gamma,
            false,
            false,
            problem.g_seed,
        )?,
        SpaceKind::Linear => KernelSpace::linear(d, false),
        SpaceKind::Quadratic => KernelSpace::quadratic(d, false),
    };
    let g_opts = OrthoOptions {
        energy_fraction: problem.g_spec.energy_fraction.unwrap_or(config.energy_fraction),
        max_rank: problem.g_spec.max_rank.or(config.max_rank),
    };
    timing.once_per_run += t0.elapsed();

    let mut y = x.to_owned();
    let mut y0 = y.clone();
    let t_stage = Instant::now();
    let mut g_basis = orthogonalize(&g_space.eval(&y0.view())?.view(), &g_opts)?;
    g_basis.set_reference_hash(matrix_content_hash(&y0.view()));
    timing.per_stage.push(t_stage.elapsed());

    let var_x = masked_variance(&x, free);
    let sigma_star = config.nu / (n as f64).sqrt();
    let mut spread0 = spread_around_mean(&y0);

    let mut lambda = 0.0_f64;
    let mut lambda_frozen = false;
    let mut eta_prev: Option<f64> = None;
    let mut records: Vec<IterRecord> = Vec::new();
    let mut stage_maps: Vec<StageMap> = Vec::new();
    let mut stage_idx = 0usize;
    let mut converged = false;
    let mut tracer_pos = problem.tracers.as_ref().map(|t| t.anchors.clone());
    let mut stages_exhausted = false;

    for iter in 0..config.max_iters {
        let t_iter = Instant::now();
        let g_vals = g_space.eval(&y.view())?;
        let qy = g_basis.apply(&g_vals.view())?;
        let a = assemble_a(&problem.z.q.view(), &qy.view())?;
        let triplets = topk(&a.view(), config.k_max);
        let max_sigma = triplets.max_sigma();
        let grad_g = g_space.eval_grad(&y.view())?;
        let w = g_basis.b().dot(&triplets.b_vecs);
        let (pen_field, pen_field_tilde) =
            penalty_fields(&problem.z.q.view(), &grad_g, &w, &triplets, sigma_star);
        let grad_cost = &y - &x;

        // λ adaptation: frozen once criterion (i) first holds, resumed if a
        // singular value later climbs back above σ*.
        if lambda_frozen && max_sigma >= sigma_star {
            lambda_frozen = false;
        }
        if !lambda_frozen {
            lambda = super::penalty::update_lambda(
                &grad_cost.view(),
                &pen_field_tilde.view(),
                var_x,
                free,
            );
        }
        let crit_sigma = max_sigma < sigma_star;
        if crit_sigma {
            lambda_frozen = true;
        }

        let mut grad = grad_cost;
        grad.scaled_add(2.0 * lambda, &pen_field);
        if let Some(mask) = free {
            for (i, is_free) in mask.iter().enumerate() {
                if !is_free {
                    grad.row_mut(i).fill(0.0);
                }
            }
        }
        let grad_norm_sq: f64 = grad.iter().map(|v| v * v).sum();
        let mean_grad_sq = grad_norm_sq / n_free as f64;
        let crit_grad = mean_grad_sq < config.alpha_term * var_x;
        let l_current = objective(&x, &y.view(), triplets.sigma_sq_sum(), lambda);

        if crit_sigma && crit_grad {
            records.push(IterRecord {
                iter,
                stage: stage_idx,
                objective: l_current,
                max_sigma,
                lambda,
                eta: 0.0,
                mean_grad_sq,
                objective_after: l_current,
            });
            stage_maps.push(freeze_stage(&problem.z, &triplets, &g_space, &g_basis, lambda));
            converged = true;
            timing.per_iteration.push(t_iter.elapsed());
            break;
        }

        let eta0 = match eta_prev {
            Some(e) => config.theta * e,
            None => 0.1 / lambda.max(1e-12),
        };
        let mut obj_fn = |trial: &Array2<f64>| -> f64 {
            let gv = g_space.eval(&trial.view()).expect("shape-consistent trial");
            let qyt = g_basis.apply(&gv.view()).expect("shape-consistent trial");
            let at = problem.z.q.t().dot(&qyt);
            objective(&x, &trial.view(), penalty_value(&at.view(), config.k_max), lambda)
        };
        let ls = line_search(
            &y,
            &grad,
            grad_norm_sq,
            l_current,
            eta0,
            config.kappa,
            config.tau,
            &mut obj_fn,
        )?;
        y = ls.y_new;
        eta_prev = Some(ls.eta);
        records.push(IterRecord {
            iter,
            stage: stage_idx,
            objective: l_current,
            max_sigma,
            lambda,
            eta: ls.eta,
            mean_grad_sq,
            objective_after: ls.objective_new,
        });

        // Tracers ride the same field: own anchor for the cost term, own
        // f_k row for the penalty term, shared η.
        if let (Some(tr), Some(pos)) = (&problem.tracers, &mut tracer_pos) {
            let t_grad_g = g_space.eval_grad(&pos.view())?;
            let (t_field, _) =
                penalty_fields(&tr.q_rows.view(), &t_grad_g, &w, &triplets, sigma_star);
            let mut t_grad = &*pos - &tr.anchors;
            t_grad.scaled_add(2.0 * lambda, &t_field);
            pos.scaled_add(-ls.eta, &t_grad);
        }
        timing.per_iteration.push(t_iter.elapsed());

        // Stage restart when y drifts δ-far from the frozen reference.
        let drift: f64 = y
            .iter()
            .zip(y0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if spread0 > 0.0 && drift > config.delta_stage * spread0 {
            stage_maps.push(freeze_stage(&problem.z, &triplets, &g_space, &g_basis, lambda));
            stage_idx += 1;
            if stage_idx >= config.max_stages {
                stages_exhausted = true;
                break;
            }
            let t_stage = Instant::now();
            y0 = y.clone();
            g_basis = orthogonalize(&g_space.eval(&y0.view())?.view(), &g_opts)?;
            g_basis.set_reference_hash(matrix_content_hash(&y0.view()));
            spread0 = spread_around_mean(&y0);
            timing.per_stage.push(t_stage.elapsed());
        }
    }

    if !converged {
        // Freeze a map consistent with the final y for diagnostics and
        // downstream use of the partial result.
        let g_vals = g_space.eval(&y.view())?;
        let qy = g_basis.apply(&g_vals.view())?;
        let a = assemble_a(&problem.z.q.view(), &qy.view())?;
        let triplets = topk(&a.view(), config.k_max);
        stage_maps.push(freeze_stage(&problem.z, &triplets, &g_space, &g_basis, lambda));
        let _ = stages_exhausted;
    }

    Ok(RunResult { y, stage_maps, converged, records, tracer_positions: tracer_pos, timing })
}

fn freeze_stage(
    z: &ZFeatures,
    triplets: &PenaltyTriplets,
    g_space: &KernelSpace,
    g_basis: &OrthoBasis,
    lambda: f64,
) -> StageMap {
    StageMap {
        f_side: z.make_factor_side(&triplets.a_vecs),
        g_space: g_space.clone(),
        g_basis: g_basis.clone(),
        b_vecs: triplets.b_vecs.clone(),
        sigmas: triplets.sigmas.clone(),
        lambda,
    }
}

/// Build the z-side features for a run from a covariate matrix and a space
/// spec. Degenerate covariates (constant columns) produce rank 0: no
/// explainable variability, the flow terminates at y = x.
pub fn build_z_features(
    z: &ArrayView2<f64>,
    spec: &SpaceSpec,
    config: &SolverConfig,
    seed: u64,
) -> Result<ZFeatures> {
    spec.validate()?;
    let opts = OrthoOptions {
        energy_fraction: spec.energy_fraction.unwrap_or(config.energy_fraction),
        max_rank: spec.max_rank.or(config.max_rank),
    };
    let d = z.ncols();
    match spec.kind {
        SpaceKind::Kernel => {
            match build_kernel_space(z, spec.m_max, spec.gamma, true, spec.truncated, seed) {
                Ok(space) => ZFeatures::from_space(space, z, &opts, seed),
                Err(Error::InvalidInput(_)) => {
                    // Fewer than 2 distinct centers: constant covariate.
                    let c = Center {
                        location: z.row(0).to_owned(),
                        inv_bandwidth: ndarray::Array2::eye(d),
                    };
                    let space = KernelSpace::kernel(vec![c], spec.gamma, true, spec.truncated)?;
                    ZFeatures::from_space(space, z, &opts, seed)
                }
                Err(e) => Err(e),
            }
        }
        SpaceKind::Linear => ZFeatures::from_space(KernelSpace::linear(d, true), z, &opts, seed),
        SpaceKind::Quadratic => {
            ZFeatures::from_space(KernelSpace::quadratic(d, true), z, &opts, seed)
        }
    }
}

/// Solve one barycenter problem on a dataset.
pub fn run(
    dataset: &Dataset,
    f_spec: &SpaceSpec,
    g_spec: &SpaceSpec,
    config: &SolverConfig,
) -> Result<RunResult> {
    config.validate()?;
    let t0 = Instant::now();
    let z = build_z_features(&dataset.z.view(), f_spec, config, derive_seed("f-space-0", config.seed))?;
    let z_build_time = t0.elapsed();
    run_flow(FlowProblem {
        x: dataset.x.view(),
        z,
        g_spec,
        config,
        free: None,
        tracers: None,
        g_seed: derive_seed("g-space-0", config.seed),
        z_build_time,
    })
}

/// Chain successive barycenter problems: stage l takes the previous stage's
/// barycenter samples as its outcome. The returned model holds one frozen
/// StageMap per problem, in application order, enabling simulation and
/// estimation by composition.
pub fn run_successive(
    dataset: &Dataset,
    stage_specs: &[StagePairSpec],
    config: &SolverConfig,
    provenance: Provenance,
) -> Result<(BarycenterModel, Vec<RunResult>)> {
    config.validate()?;
    if stage_specs.is_empty() {
        return Err(Error::Config("at least one stage spec required".into()));
    }
    let mut x_cur = dataset.x.clone();
    let mut results = Vec::with_capacity(stage_specs.len());
    let mut stages = Vec::with_capacity(stage_specs.len());
    for (idx, pair) in stage_specs.iter().enumerate() {
        let t0 = Instant::now();
        let z = build_z_features(
            &dataset.z.view(),
            &pair.f,
            config,
            derive_seed(&format!("f-space-{idx}"), config.seed),
        )?;
        let z_build_time = t0.elapsed();
        let res = run_flow(FlowProblem {
            x: x_cur.view(),
            z,
            g_spec: &pair.g,
            config,
            free: None,
            tracers: None,
            g_seed: derive_seed(&format!("g-space-{idx}"), config.seed),
            z_build_time,
        })?;
        x_cur = res.y.clone();
        stages.push(res.stage_maps.last().expect("at least one stage map").clone());
        results.push(res);
    }
    let model = BarycenterModel {
        schema: dataset.schema.clone(),
        stages,
        y_final: x_cur,
        provenance,
    };
    Ok((model, results))
}
