//! Plain Monge optimal transport through the binary-covariate reduction,
//! plus density estimation by change of variables and grid-based Bayesian
//! inference built on top of the barycenter machinery.

mod bayes;
mod density;
mod ot;

pub use bayes::{bayes_online, bayes_posterior, kernel_prior, PosteriorResult, ThetaGrid, ZPrior};
pub use density::{
    conditional_density_per_z, estimate_density, ConditionalDensity, DensityEstimate, ProbeDensity,
    ReferenceSpec,
};
pub use ot::{solve_ot, solve_ot_with_tracers, OtMode, OTResult};
