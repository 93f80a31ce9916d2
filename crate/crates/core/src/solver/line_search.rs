//! Armijo–Goldstein backtracking, restarted each iteration from θ times the
//! previously accepted rate so the explored interval stays close to the
//! established one.

use ndarray::Array2;

use crate::{Error, Result};

const MAX_HALVINGS: usize = 60;

#[derive(Debug)]
pub struct LineSearchResult {
    pub eta: f64,
    pub y_new: Array2<f64>,
    pub objective_new: f64,
    /// Objective evaluations spent.
    pub evals: usize,
}

/// Backtrack from `eta0`: accept η once
/// L(y − ηG) ≤ L(y) − κη‖G‖². If Armijo never holds within the retry
/// budget, the smallest trial step that produced any decrease is accepted;
/// with no decrease at all the search reports a stall.
pub fn line_search(
    y: &Array2<f64>,
    direction: &Array2<f64>,
    grad_norm_sq: f64,
    objective_current: f64,
    eta0: f64,
    kappa: f64,
    tau: f64,
    objective: &mut dyn FnMut(&Array2<f64>) -> f64,
) -> Result<LineSearchResult> {
    let mut eta = eta0;
    let mut evals = 0;
    let mut fallback: Option<(f64, Array2<f64>, f64)> = None;
    for _ in 0..=MAX_HALVINGS {
        let trial = y - &(direction * eta);
        let l_trial = objective(&trial);
        evals += 1;
        if l_trial <= objective_current - kappa * eta * grad_norm_sq {
            return Ok(LineSearchResult { eta, y_new: trial, objective_new: l_trial, evals });
        }
        if l_trial < objective_current {
            // Most recent decreasing trial has the smallest η so far.
            fallback = Some((eta, trial, l_trial));
        }
        eta *= tau;
    }
    if let Some((eta, y_new, objective_new)) = fallback {
        return Ok(LineSearchResult { eta, y_new, objective_new, evals });
    }
    Err(Error::LineSearchStall { halvings: MAX_HALVINGS })
}
