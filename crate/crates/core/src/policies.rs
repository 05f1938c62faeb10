//! Recruitment policies.
//!
//! | kind | sampling | inference |
//! |------|----------|-----------|
//! | [`PolicyKind::ConventionalStudy`] | uniform random | naive |
//! | [`PolicyKind::ThresholdingBandits`] | least naive sensitivity | naive |
//! | [`PolicyKind::SyntheticStudy`] | uniform random | synthetic |
//! | [`PolicyKind::SyntheticDesign`] | minimax variance bound, ignores outcomes | synthetic |
//! | [`PolicyKind::Syntax`] | least synthetic sensitivity, then best phantom sample | synthetic |
//!
//! Every kind spends its first `2K` episodes on one patient per
//! `(subpopulation, group)` pair in index order, so all running means exist
//! before any adaptive rule reads them. Policies hold no mutable state; all
//! progress lives in the [`TrialState`] they are handed.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, CountView, EstimatorConfig, TrialState, WeightSolver};
use crate::sim::Group;

/// Relative margin a value must beat the incumbent by to win an argmin;
/// otherwise the lower index is kept.
pub const COMPARISON_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "syntax")]
    Syntax,
    #[serde(rename = "conventional")]
    ConventionalStudy,
    #[serde(rename = "thresholding")]
    ThresholdingBandits,
    #[serde(rename = "synthetic-study")]
    SyntheticStudy,
    #[serde(rename = "synthetic-design")]
    SyntheticDesign,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::ConventionalStudy,
        PolicyKind::ThresholdingBandits,
        PolicyKind::SyntheticStudy,
        PolicyKind::SyntheticDesign,
        PolicyKind::Syntax,
    ];

    /// Config-file identifier.
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Syntax => "syntax",
            PolicyKind::ConventionalStudy => "conventional",
            PolicyKind::ThresholdingBandits => "thresholding",
            PolicyKind::SyntheticStudy => "synthetic-study",
            PolicyKind::SyntheticDesign => "synthetic-design",
        }
    }

    /// Human-readable label for tables.
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Syntax => "SYNTAX",
            PolicyKind::ConventionalStudy => "Conventional study",
            PolicyKind::ThresholdingBandits => "Thresholding bandits",
            PolicyKind::SyntheticStudy => "Synthetic study",
            PolicyKind::SyntheticDesign => "Synthetic design",
        }
    }

    /// Whether the kind needs the factor effect parameter.
    pub fn uses_lambda(self) -> bool {
        matches!(
            self,
            PolicyKind::Syntax | PolicyKind::SyntheticStudy | PolicyKind::SyntheticDesign
        )
    }

    pub fn estimator_kind(self) -> EstimatorKind {
        if self.uses_lambda() {
            EstimatorKind::Synthetic
        } else {
            EstimatorKind::Naive
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown policy {s:?}; expected one of syntax, conventional, thresholding, synthetic-study, synthetic-design"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    Naive,
    Synthetic,
}

/// Recruit one patient from `subpopulation` into `group`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub subpopulation: usize,
    pub group: Group,
}

impl PolicyDecision {
    pub fn new(subpopulation: usize, group: Group) -> Self {
        PolicyDecision { subpopulation, group }
    }
}

/// Final inference of a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Subpopulations declared to have a positive effect.
    pub selected: BTreeSet<usize>,
    pub estimates: Vec<f64>,
    pub estimator_kind: EstimatorKind,
}

impl SelectionResult {
    /// Applies the zero threshold to `estimates`.
    pub fn from_estimates(estimates: Vec<f64>, estimator_kind: EstimatorKind) -> Self {
        let selected = estimates
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0.0)
            .map(|(i, _)| i)
            .collect();
        SelectionResult {
            selected,
            estimates,
            estimator_kind,
        }
    }
}

/// A policy kind together with the estimator parameters it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    kind: PolicyKind,
    estimator: Option<EstimatorConfig>,
}

impl Policy {
    /// `estimator` must be present exactly for the kinds that use `lambda`.
    pub fn new(kind: PolicyKind, estimator: Option<EstimatorConfig>) -> Result<Self> {
        match (kind.uses_lambda(), estimator) {
            (true, None) => Err(Error::InvalidConfig(format!("policy {kind} requires lambda"))),
            (false, Some(_)) => Err(Error::InvalidConfig(format!("policy {kind} takes no lambda"))),
            (_, Some(cfg)) => {
                cfg.validate()?;
                Ok(Policy { kind, estimator })
            }
            (false, None) => Ok(Policy { kind, estimator }),
        }
    }

    /// Builds any kind, attaching `(lambda, sigma)` only where it is used.
    pub fn with_params(kind: PolicyKind, lambda: f64, sigma: f64) -> Result<Self> {
        let estimator = if kind.uses_lambda() {
            Some(EstimatorConfig::new(lambda, sigma)?)
        } else {
            None
        };
        Policy::new(kind, estimator)
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn estimator(&self) -> Option<&EstimatorConfig> {
        self.estimator.as_ref()
    }

    fn cfg(&self) -> &EstimatorConfig {
        self.estimator
            .as_ref()
            .expect("constructor guarantees an estimator config for synthetic kinds")
    }

    /// Chooses the recruitment for zero-based `episode`.
    pub fn decide<R: Rng + ?Sized>(&self, state: &TrialState, episode: usize, rng: &mut R) -> Result<PolicyDecision> {
        let k = state.subpopulations();
        if let Some(d) = warm_start_decision(k, episode) {
            return Ok(d);
        }
        match self.kind {
            PolicyKind::ConventionalStudy | PolicyKind::SyntheticStudy => {
                let cell = rng.random_range(0..2 * k);
                Ok(PolicyDecision::new(cell / 2, group_of(cell % 2)))
            }
            PolicyKind::ThresholdingBandits => {
                let i = argmin((0..k).map(|i| estimator::naive_sensitivity(state, i)))?;
                let group = if state.count(i, Group::Treatment) < state.count(i, Group::Control) {
                    Group::Treatment
                } else {
                    Group::Control
                };
                Ok(PolicyDecision::new(i, group))
            }
            PolicyKind::Syntax => {
                let cfg = self.cfg();
                let target = least_sensitive(state, cfg)?;
                best_phantom_sample(state, target, cfg)
            }
            PolicyKind::SyntheticDesign => minimax_phantom_sample(state, self.cfg()),
        }
    }

    /// Final estimates and the positive-effect selection.
    pub fn finalize(&self, state: &TrialState) -> Result<SelectionResult> {
        for i in 0..state.subpopulations() {
            for group in Group::BOTH {
                if state.count(i, group) == 0 {
                    return Err(Error::UndefinedMean {
                        subpopulation: i,
                        group,
                    });
                }
            }
        }
        let k = state.subpopulations();
        let estimates = match self.kind.estimator_kind() {
            EstimatorKind::Naive => (0..k).map(|i| estimator::naive_estimate(state, i)).collect::<Result<Vec<_>>>()?,
            EstimatorKind::Synthetic => {
                estimator::fit_all(state, self.cfg())?.into_iter().map(|f| f.estimate).collect()
            }
        };
        Ok(SelectionResult::from_estimates(estimates, self.kind.estimator_kind()))
    }
}

/// Number of initial episodes spent on one sample per cell.
pub fn warm_start_len(k: usize) -> usize {
    2 * k
}

fn group_of(alpha: usize) -> Group {
    Group::from_index(alpha).expect("alpha is 0 or 1")
}

fn warm_start_decision(k: usize, episode: usize) -> Option<PolicyDecision> {
    (episode < warm_start_len(k)).then(|| PolicyDecision::new(episode / 2, group_of(episode % 2)))
}

fn improves(candidate: f64, incumbent: Option<f64>) -> bool {
    match incumbent {
        None => true,
        Some(best) => candidate < best - COMPARISON_TOL * best.abs(),
    }
}

/// Index of the smallest value; the lowest index wins near-ties.
pub fn argmin(values: impl IntoIterator<Item = Result<f64>>) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, v) in values.into_iter().enumerate() {
        let v = v?;
        if improves(v, best.map(|b| b.1)) {
            best = Some((idx, v));
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::InvalidConfig("argmin over an empty set".into()))
}

/// Subpopulation with the smallest synthetic sensitivity index.
pub fn least_sensitive(state: &TrialState, cfg: &EstimatorConfig) -> Result<usize> {
    argmin(estimator::fit_all(state, cfg)?.iter().map(|f| Ok(f.sensitivity())))
}

/// Cells in lexicographic `(subpopulation, group)` order.
fn cells(k: usize) -> impl Iterator<Item = PolicyDecision> {
    (0..k).flat_map(|i| Group::BOTH.into_iter().map(move |g| PolicyDecision::new(i, g)))
}

/// The cell whose extra sample most reduces the re-optimised bound of `target`.
pub fn best_phantom_sample(state: &TrialState, target: usize, cfg: &EstimatorConfig) -> Result<PolicyDecision> {
    let base = CountView::observed(state);
    let k = state.subpopulations();
    let idx = argmin(cells(k).map(|d| {
        let view = base.with_phantom(d.subpopulation, d.group);
        estimator::solve_beta(state, target, cfg, Some(view)).map(|w| w.objective_value)
    }))?;
    Ok(cells(k).nth(idx).expect("argmin index in range"))
}

/// The cell minimising the worst re-optimised bound over all targets.
pub fn minimax_phantom_sample(state: &TrialState, cfg: &EstimatorConfig) -> Result<PolicyDecision> {
    let base = CountView::observed(state);
    let k = state.subpopulations();
    let mut best: Option<(PolicyDecision, f64)> = None;
    for d in cells(k) {
        let solver = WeightSolver::new(state, cfg, Some(base.with_phantom(d.subpopulation, d.group)))?;
        let mut worst = f64::NEG_INFINITY;
        let mut pruned = false;
        for target in 0..k {
            let v = solver.solve(target)?.objective_value;
            worst = worst.max(v);
            // worst only grows, so once it cannot win the rest is moot
            if !improves(worst, best.map(|b| b.1)) {
                pruned = true;
                break;
            }
        }
        if !pruned {
            best = Some((d, worst));
        }
    }
    Ok(best.expect("at least one cell").0)
}
