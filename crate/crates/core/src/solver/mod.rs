//! The penalized gradient-descent flow solving the sample-based barycenter
//! problem: minimize Σ_i ½‖y_i − x_i‖² + λ Σ_k σ_k²(A(y)) over the sample
//! positions, where A = QzᵀQy couples the orthogonalized test-function
//! spaces and its top singular triplets are the optimal adversarial
//! features.

mod config;
pub mod flow;
mod line_search;
pub mod penalty;

pub use config::{SolverConfig, SpaceSpec, StagePairSpec};
pub use flow::{
    build_z_features, run, run_flow, run_successive, FlowProblem, IterRecord, RunResult,
    TracerInput, Timing, ZFeatures,
};
pub use line_search::{line_search, LineSearchResult};
pub use penalty::{
    assemble_a, grad_y, objective, penalty_value, topk, update_lambda, PenaltyTriplets,
};
