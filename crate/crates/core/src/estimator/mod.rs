//! Treatment-effect estimators and the variance bound that ranks them.
//!
//! The naive estimator compares a subpopulation's own treated and control
//! means. A synthetic estimator replaces the control mean with a weighted
//! combination `beta^T yhat^(0)` of every subpopulation's control mean.
//! It stays unbiased as long as `beta` reproduces the target's features and
//! pre-treatment means and sums to one, and its variance is bounded by
//!
//! ```text
//! V_i(beta) = sigma^2 (1/n_i^(1) + ||beta||^2_{N0^-1} + lambda ||beta - 1_i||^2_{N^-1})
//! ```
//!
//! [`solve_beta`] minimises that bound, so the chosen weights are never worse
//! than the indicator `1_i`, which reproduces the naive estimator exactly.

mod kkt;
mod lambda;
mod state;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::Group;

pub use kkt::{CONSTRAINT_TOL, SUM_TOL};
pub use lambda::{lambda_oracle, lambda_upper_bound};
pub use state::{CountView, TrialState};

/// Parameters of the variance bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Factor effect parameter weighting the representation error.
    pub lambda: f64,
    /// Response noise standard deviation.
    pub sigma: f64,
}

impl EstimatorConfig {
    pub fn new(lambda: f64, sigma: f64) -> Result<Self> {
        let cfg = EstimatorConfig { lambda, sigma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidLambda(self.lambda));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma > 0 required, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Synthetic-control weights decomposing subpopulation `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub beta: Vec<f64>,
    pub target: usize,
    /// Variance bound attained by `beta`.
    pub objective_value: f64,
    /// Set when the QP could not be solved reliably and `beta` is the
    /// indicator of `target` instead.
    #[serde(default)]
    pub fallback: bool,
}

impl Weights {
    /// The decomposition of `i` as itself.
    pub fn trivial(state: &TrialState, i: usize, cfg: &EstimatorConfig) -> Result<Self> {
        cfg.validate()?;
        let counts = CountView::observed(state);
        kkt::check_target(state, i, &counts)?;
        let beta = kkt::indicator(state.subpopulations(), i);
        let objective_value = cfg.sigma * cfg.sigma * kkt::unit_bound(&beta, i, cfg.lambda, &counts);
        Ok(Weights {
            beta,
            target: i,
            objective_value,
            fallback: false,
        })
    }

    pub fn is_trivial(&self) -> bool {
        self.beta
            .iter()
            .enumerate()
            .all(|(j, &b)| if j == self.target { b == 1.0 } else { b == 0.0 })
    }

    /// Max residual over feature and pre-treatment rows, and the sum-to-one
    /// residual, evaluated against `state`.
    pub fn constraint_residuals(&self, state: &TrialState) -> (f64, f64) {
        kkt::constraint_residuals(state, self.target, &self.beta)
    }
}

/// `yhat_iT^(1) - yhat_iT^(0)`.
pub fn naive_estimate(state: &TrialState, i: usize) -> Result<f64> {
    let treated = state.final_mean(i, Group::Treatment)?;
    let control = state.final_mean(i, Group::Control)?;
    Ok(treated - control)
}

/// `yhat_iT^(1) - beta^T yhat_T^(0)`, summing only over nonzero weights.
pub fn synthetic_estimate(state: &TrialState, weights: &Weights) -> Result<f64> {
    let i = weights.target;
    if weights.beta.len() != state.subpopulations() {
        return Err(Error::Dimension("weights length does not match K".into()));
    }
    let treated = state.final_mean(i, Group::Treatment)?;
    let mut control = 0.0;
    for (j, &b) in weights.beta.iter().enumerate() {
        if b != 0.0 {
            control += b * state.final_mean(j, Group::Control)?;
        }
    }
    Ok(treated - control)
}

/// Variance bound `V_i(beta)` of `weights` under the observed counts, or
/// under `counts` when given.
pub fn variance_bound(
    weights: &Weights,
    state: &TrialState,
    cfg: &EstimatorConfig,
    counts: Option<CountView<'_>>,
) -> Result<f64> {
    cfg.validate()?;
    let counts = counts.unwrap_or_else(|| CountView::observed(state));
    let i = weights.target;
    if weights.beta.len() != state.subpopulations() {
        return Err(Error::Dimension("weights length does not match K".into()));
    }
    kkt::check_target(state, i, &counts)?;
    for (j, &b) in weights.beta.iter().enumerate() {
        if b != 0.0 && counts.get(j, Group::Control) == 0 {
            return Err(Error::UndefinedMean {
                subpopulation: j,
                group: Group::Control,
            });
        }
    }
    Ok(cfg.sigma * cfg.sigma * kkt::unit_bound(&weights.beta, i, cfg.lambda, &counts))
}

/// Weights minimising `V_i` subject to matching `x_i`, the pooled
/// pre-treatment means of `i`, and summing to one.
pub fn solve_beta(
    state: &TrialState,
    i: usize,
    cfg: &EstimatorConfig,
    counts: Option<CountView<'_>>,
) -> Result<Weights> {
    WeightSolver::new(state, cfg, counts)?.solve(i)
}

/// [`solve_beta`] for any number of targets under one count matrix. The
/// constraint system is factored once and shared.
pub struct WeightSolver<'a> {
    state: &'a TrialState,
    system: kkt::KktSystem<'a>,
    cfg: EstimatorConfig,
}

impl<'a> WeightSolver<'a> {
    pub fn new(state: &'a TrialState, cfg: &EstimatorConfig, counts: Option<CountView<'a>>) -> Result<Self> {
        cfg.validate()?;
        let counts = counts.unwrap_or_else(|| CountView::observed(state));
        if counts.len() != state.subpopulations() {
            return Err(Error::Dimension("count matrix does not match the number of subpopulations".into()));
        }
        Ok(WeightSolver {
            state,
            system: kkt::KktSystem::new(state, cfg.lambda, counts),
            cfg: *cfg,
        })
    }

    pub fn solve(&self, i: usize) -> Result<Weights> {
        kkt::check_target(self.state, i, self.system.counts())?;
        let sol = self.system.solve_target(i)?;
        Ok(Weights {
            beta: sol.beta,
            target: i,
            objective_value: self.cfg.sigma * self.cfg.sigma * sol.unit_objective,
            fallback: sol.fallback,
        })
    }
}

/// Optimal weights for one subpopulation together with the resulting
/// estimate and bound.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFit {
    pub weights: Weights,
    pub estimate: f64,
}

impl SyntheticFit {
    pub fn variance(&self) -> f64 {
        self.weights.objective_value
    }

    /// `|r_hat| / sqrt(V)`.
    pub fn sensitivity(&self) -> f64 {
        self.estimate.abs() / self.variance().sqrt()
    }
}

pub fn fit(state: &TrialState, i: usize, cfg: &EstimatorConfig) -> Result<SyntheticFit> {
    let weights = solve_beta(state, i, cfg, None)?;
    let estimate = synthetic_estimate(state, &weights)?;
    Ok(SyntheticFit { weights, estimate })
}

/// [`fit`] for every subpopulation, sharing one factorisation.
pub fn fit_all(state: &TrialState, cfg: &EstimatorConfig) -> Result<Vec<SyntheticFit>> {
    let solver = WeightSolver::new(state, cfg, None)?;
    (0..state.subpopulations())
        .map(|i| {
            let weights = solver.solve(i)?;
            let estimate = synthetic_estimate(state, &weights)?;
            Ok(SyntheticFit { weights, estimate })
        })
        .collect()
}

/// `|r_hat_i(beta*_i)| / sqrt(V_i(beta*_i))`; small values mark the
/// subpopulations whose effect sign is least certain.
pub fn sensitivity_index(state: &TrialState, i: usize, cfg: &EstimatorConfig) -> Result<f64> {
    Ok(fit(state, i, cfg)?.sensitivity())
}

/// Sensitivity of the naive estimator, `|r_naive| / sqrt(1/n0 + 1/n1)`.
pub fn naive_sensitivity(state: &TrialState, i: usize) -> Result<f64> {
    let r = naive_estimate(state, i)?;
    let n0 = state.count(i, Group::Control) as f64;
    let n1 = state.count(i, Group::Treatment) as f64;
    Ok(r.abs() / (1.0 / n0 + 1.0 / n1).sqrt())
}

#[cfg(test)]
mod tests;
