use serde::{Deserialize, Serialize};

use crate::kernelspace::SpaceKind;
use crate::{Error, Result};

/// Flow parameters. Defaults follow the values used throughout the
/// experiments: ν=0.2, α=0.0025, δ=0.1, θ=1.1, κ=τ=0.5.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Number of tracked singular triplets, K_max.
    pub k_max: usize,
    /// Termination scale: σ* = ν/√n.
    pub nu: f64,
    /// Gradient criterion: mean ‖∇L‖² < α·var(x).
    pub alpha_term: f64,
    /// Stage restart when Σ‖y−y⁰‖² > δ·Σ‖y⁰−ȳ⁰‖².
    pub delta_stage: f64,
    /// Learning-rate growth per iteration.
    pub theta: f64,
    /// Armijo sufficient-decrease constant.
    pub kappa: f64,
    /// Backtracking factor.
    pub tau: f64,
    /// Default energy fraction for orthogonalizations.
    pub energy_fraction: f64,
    /// Default hard cap on orthogonalization ranks.
    pub max_rank: Option<usize>,
    pub max_iters: usize,
    pub max_stages: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            k_max: 8,
            nu: 0.2,
            alpha_term: 0.0025,
            delta_stage: 0.1,
            theta: 1.1,
            kappa: 0.5,
            tau: 0.5,
            energy_fraction: 0.99,
            max_rank: None,
            max_iters: 20000,
            max_stages: 50,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.k_max < 1 {
            return bad("k_max must be at least 1");
        }
        if !(self.nu > 0.0) {
            return bad("nu must be positive");
        }
        if !(self.alpha_term > 0.0) {
            return bad("alpha_term must be positive");
        }
        if !(self.delta_stage > 0.0 && self.delta_stage < 1.0) {
            return bad("delta_stage must lie strictly in (0, 1)");
        }
        if !(self.theta > 1.0) {
            return bad("theta must exceed 1");
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return bad("kappa must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if !(self.energy_fraction > 0.0 && self.energy_fraction <= 1.0) {
            return bad("energy_fraction must lie in (0, 1]");
        }
        if self.max_iters < 1 || self.max_stages < 1 {
            return bad("max_iters and max_stages must be at least 1");
        }
        Ok(())
    }
}

/// Description of one functional space (F or G) for a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSpec {
    pub kind: SpaceKind,
    /// Cap on kernel centers; m = min(⌊√n⌋, m_max).
    pub m_max: usize,
    /// User bandwidth scale γ: effective inverse bandwidths are S_j⁰/γ².
    pub gamma: f64,
    /// Per-space override of the orthogonalization energy fraction.
    pub energy_fraction: Option<f64>,
    /// Per-space override of the rank cap.
    pub max_rank: Option<usize>,
    /// Compact-support truncation for time-like covariates (sparse F path).
    pub truncated: bool,
}

impl Default for SpaceSpec {
    fn default() -> Self {
        Self {
            kind: SpaceKind::Kernel,
            m_max: 200,
            gamma: 1.0,
            energy_fraction: None,
            max_rank: None,
            truncated: false,
        }
    }
}

impl SpaceSpec {
    pub fn kernel(m_max: usize, gamma: f64) -> Self {
        Self { kind: SpaceKind::Kernel, m_max, gamma, ..Self::default() }
    }

    pub fn quadratic() -> Self {
        Self { kind: SpaceKind::Quadratic, ..Self::default() }
    }

    pub fn linear() -> Self {
        Self { kind: SpaceKind::Linear, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_max < 1 {
            return Err(Error::Config("m_max must be at least 1".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if let Some(ef) = self.energy_fraction {
            if !(ef > 0.0 && ef <= 1.0) {
                return Err(Error::Config("energy_fraction must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// F/G pair for one successive barycenter problem.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StagePairSpec {
    pub f: SpaceSpec,
    pub g: SpaceSpec,
}
