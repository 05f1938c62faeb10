//! Ground-truth trial environments.
//!
//! Baseline responses follow a linear factor model: subpopulation `i` at
//! period `t` has mean `delta[t] + w_t·x_i + mu_t·z_i`, with observable
//! features `x_i` and latent loadings `z_i`. The final period `T-1` is the
//! post-treatment step, where treated patients additionally receive the
//! effect `r[i]`.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment group assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Control,
    Treatment,
}

impl Group {
    pub const BOTH: [Group; 2] = [Group::Control, Group::Treatment];

    pub fn index(self) -> usize {
        match self {
            Group::Control => 0,
            Group::Treatment => 1,
        }
    }

    pub fn from_index(alpha: usize) -> Option<Group> {
        match alpha {
            0 => Some(Group::Control),
            1 => Some(Group::Treatment),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Control => "control",
            Group::Treatment => "treatment",
        })
    }
}

/// How factor magnitudes evolve towards the post-treatment period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorRegime {
    /// `mu_t = (2 - 10^(t-T)) mu'_t`: strong pre-treatment signal, weak at `T`.
    #[default]
    Diminishing,
    /// `mu_t = 10^(t-T) mu'_t`: factors dominate only at the final period.
    Increasing,
}

impl FactorRegime {
    /// Scale applied to the unit-ball direction at zero-based period `t`
    /// out of `periods`.
    pub fn multiplier(self, t: usize, periods: usize) -> f64 {
        let exponent = t as f64 - (periods as f64 - 1.0);
        let p = 10f64.powf(exponent);
        match self {
            FactorRegime::Diminishing => 2.0 - p,
            FactorRegime::Increasing => p,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FactorRegime::Diminishing => "diminishing",
            FactorRegime::Increasing => "increasing",
        }
    }
}

/// Departures from the linear factor model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mismatch {
    #[default]
    #[serde(rename = "none")]
    None,
    /// Responses depend on the element-wise square of the features.
    #[serde(rename = "squared", alias = "squared-features")]
    SquaredFeatures,
    /// As many latent factors as periods, so loadings are not identifiable.
    #[serde(rename = "fullrank", alias = "full-rank-factors")]
    FullRankFactors,
}

impl Mismatch {
    pub fn name(self) -> &'static str {
        match self {
            Mismatch::None => "none",
            Mismatch::SquaredFeatures => "squared",
            Mismatch::FullRankFactors => "fullrank",
        }
    }
}

fn default_subpopulations() -> usize {
    25
}
fn default_periods() -> usize {
    5
}
fn default_dim() -> usize {
    2
}
fn default_sigma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Number of subpopulations `K`.
    #[serde(default = "default_subpopulations", alias = "K")]
    pub subpopulations: usize,
    /// Number of periods `T`; the last one is post-treatment.
    #[serde(default = "default_periods", alias = "T")]
    pub periods: usize,
    #[serde(default = "default_dim", alias = "D_x")]
    pub feature_dim: usize,
    /// Ignored (forced to `periods`) under [`Mismatch::FullRankFactors`].
    #[serde(default = "default_dim", alias = "D_z")]
    pub factor_dim: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub factor_regime: FactorRegime,
    #[serde(default)]
    pub mismatch: Mismatch,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            subpopulations: default_subpopulations(),
            periods: default_periods(),
            feature_dim: default_dim(),
            factor_dim: default_dim(),
            sigma: default_sigma(),
            factor_regime: FactorRegime::default(),
            mismatch: Mismatch::default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn effective_factor_dim(&self) -> usize {
        match self.mismatch {
            Mismatch::FullRankFactors => self.periods,
            _ => self.factor_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.subpopulations < 2 {
            return fail(format!("K >= 2 required, got K = {}", self.subpopulations));
        }
        if self.periods < 2 {
            return fail(format!("T >= 2 required, got T = {}", self.periods));
        }
        if self.feature_dim < 1 {
            return fail("D_x >= 1 required".into());
        }
        if self.factor_dim < 1 {
            return fail("D_z >= 1 required".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma > 0 required, got {}", self.sigma));
        }
        if self.mismatch != Mismatch::FullRankFactors {
            if self.feature_dim + self.factor_dim >= self.subpopulations {
                return fail(format!(
                    "D_x + D_z < K required, got {} + {} >= {}",
                    self.feature_dim, self.factor_dim, self.subpopulations
                ));
            }
            if self.periods <= self.factor_dim {
                return fail(format!(
                    "T > D_z required, got T = {} <= D_z = {}",
                    self.periods, self.factor_dim
                ));
            }
        }
        Ok(())
    }
}

/// Raw fields for building an [`Environment`] directly.
///
/// Matrices are column-per-subpopulation (`features`, `loadings`) or
/// column-per-period (`weights`, `factors`).
#[derive(Debug, Clone)]
pub struct EnvironmentParts {
    pub features: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub delta: Vec<f64>,
    pub weights: DMatrix<f64>,
    pub factors: DMatrix<f64>,
    pub effects: Vec<f64>,
    pub sigma: f64,
    pub mismatch: Mismatch,
}

/// Latent side of an environment. Only the harness and tests read this;
/// policies and estimators are handed a [`crate::TrialState`] instead.
#[derive(Debug, Clone, Copy)]
pub struct Latent<'a> {
    pub loadings: &'a DMatrix<f64>,
    pub delta: &'a [f64],
    pub weights: &'a DMatrix<f64>,
    pub factors: &'a DMatrix<f64>,
    pub effects: &'a [f64],
}

/// A ground-truth trial world. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnvironmentDoc", into = "EnvironmentDoc")]
pub struct Environment {
    features: DMatrix<f64>,
    loadings: DMatrix<f64>,
    delta: Vec<f64>,
    weights: DMatrix<f64>,
    factors: DMatrix<f64>,
    effects: Vec<f64>,
    sigma: f64,
    mismatch: Mismatch,
}

impl Environment {
    pub fn from_parts(parts: EnvironmentParts) -> Result<Self> {
        let k = parts.features.ncols();
        let periods = parts.delta.len();
        let dim = |what: &str| Err(Error::Dimension(what.to_string()));
        if k < 2 || periods < 2 {
            return dim("need at least 2 subpopulations and 2 periods");
        }
        if parts.loadings.ncols() != k || parts.effects.len() != k {
            return dim("loadings and effects must have one entry per subpopulation");
        }
        if parts.weights.ncols() != periods || parts.factors.ncols() != periods {
            return dim("weights and factors must have one column per period");
        }
        if parts.weights.nrows() != parts.features.nrows() {
            return dim("weights and features must share the feature dimension");
        }
        if parts.factors.nrows() != parts.loadings.nrows() {
            return dim("factors and loadings must share the factor dimension");
        }
        if !(parts.sigma > 0.0 && parts.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma > 0 required, got {}", parts.sigma)));
        }
        Ok(Environment {
            features: parts.features,
            loadings: parts.loadings,
            delta: parts.delta,
            weights: parts.weights,
            factors: parts.factors,
            effects: parts.effects,
            sigma: parts.sigma,
            mismatch: parts.mismatch,
        })
    }

    pub fn generate<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<Self> {
        generate_environment(cfg, rng)
    }

    pub fn subpopulations(&self) -> usize {
        self.features.ncols()
    }

    pub fn periods(&self) -> usize {
        self.delta.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn factor_dim(&self) -> usize {
        self.loadings.nrows()
    }

    /// Observable features, one column per subpopulation.
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mismatch(&self) -> Mismatch {
        self.mismatch
    }

    pub fn latent(&self) -> Latent<'_> {
        Latent {
            loadings: &self.loadings,
            delta: &self.delta,
            weights: &self.weights,
            factors: &self.factors,
            effects: &self.effects,
        }
    }

    /// Same world with a different noise level.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        let mut parts = self.clone().into_parts();
        parts.sigma = sigma;
        Environment::from_parts(parts)
    }

    pub fn into_parts(self) -> EnvironmentParts {
        EnvironmentParts {
            features: self.features,
            loadings: self.loadings,
            delta: self.delta,
            weights: self.weights,
            factors: self.factors,
            effects: self.effects,
            sigma: self.sigma,
            mismatch: self.mismatch,
        }
    }

    fn check_subpopulation(&self, i: usize) -> Result<()> {
        if i >= self.subpopulations() {
            return Err(Error::SubpopulationOutOfRange {
                index: i,
                k: self.subpopulations(),
            });
        }
        Ok(())
    }

    fn check_period(&self, t: usize) -> Result<()> {
        if t >= self.periods() {
            return Err(Error::TimeOutOfRange {
                index: t,
                periods: self.periods(),
            });
        }
        Ok(())
    }

    fn mean_unchecked(&self, i: usize, t: usize) -> f64 {
        let x = self.features.column(i);
        let w = self.weights.column(t);
        let feature_part = match self.mismatch {
            Mismatch::SquaredFeatures => w.iter().zip(x.iter()).map(|(w, x)| w * x * x).sum(),
            _ => w.dot(&x),
        };
        self.delta[t] + feature_part + self.factors.column(t).dot(&self.loadings.column(i))
    }
}

fn sample_unit_ball<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    // Normalised Gaussian direction, radius u^(1/d).
    let mut v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = v.norm();
    let u: f64 = rng.random();
    let radius = u.powf(1.0 / dim as f64);
    if norm > 0.0 {
        v *= radius / norm;
    }
    v
}

/// Draws a fresh environment. Deterministic in `(cfg, rng state)`.
pub fn generate_environment<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<Environment> {
    cfg.validate()?;
    let k = cfg.subpopulations;
    let periods = cfg.periods;
    let dx = cfg.feature_dim;
    let dz = cfg.effective_factor_dim();

    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    // Effects come first so the positive set does not move with D_z,
    // the regime, or the mismatch setting.
    let effects: Vec<f64> = (0..k).map(|_| normal()).collect();
    let features = DMatrix::from_fn(dx, k, |_, _| normal());
    let loadings = DMatrix::from_fn(dz, k, |_, _| normal());
    let delta: Vec<f64> = (0..periods).map(|_| normal()).collect();

    let mut weights = DMatrix::zeros(dx, periods);
    for t in 0..periods {
        weights.set_column(t, &sample_unit_ball(dx, rng));
    }
    let mut factors = DMatrix::zeros(dz, periods);
    for t in 0..periods {
        let direction = sample_unit_ball(dz, rng);
        factors.set_column(t, &(direction * cfg.factor_regime.multiplier(t, periods)));
    }

    Environment::from_parts(EnvironmentParts {
        features,
        loadings,
        delta,
        weights,
        factors,
        effects,
        sigma: cfg.sigma,
        mismatch: cfg.mismatch,
    })
}

/// Expected untreated response of subpopulation `i` at period `t`.
pub fn mean_response(env: &Environment, i: usize, t: usize) -> Result<f64> {
    env.check_subpopulation(i)?;
    env.check_period(t)?;
    Ok(env.mean_unchecked(i, t))
}

/// One recruited patient's observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Baseline responses for periods `0..T-1`.
    pub pre: Vec<f64>,
    /// Response at the post-treatment period.
    pub outcome: f64,
}

pub fn sample_episode<R: Rng + ?Sized>(
    env: &Environment,
    i: usize,
    group: Group,
    rng: &mut R,
) -> Result<Episode> {
    env.check_subpopulation(i)?;
    let last = env.periods() - 1;
    let mut noisy = |mean: f64| mean + env.sigma * rng.sample::<f64, _>(StandardNormal);
    let pre = (0..last).map(|t| noisy(env.mean_unchecked(i, t))).collect();
    let shift = match group {
        Group::Control => 0.0,
        Group::Treatment => env.effects[i],
    };
    let outcome = noisy(env.mean_unchecked(i, last) + shift);
    Ok(Episode { pre, outcome })
}

/// Subpopulations with a strictly positive treatment effect.
pub fn true_positive_set(env: &Environment) -> BTreeSet<usize> {
    env.effects
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Serialized form: matrices as arrays of rows.
#[derive(Serialize, Deserialize)]
struct EnvironmentDoc {
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    #[serde(rename = "Z")]
    z: Vec<Vec<f64>>,
    delta: Vec<f64>,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    #[serde(rename = "M")]
    m: Vec<Vec<f64>>,
    r: Vec<f64>,
    sigma: f64,
    #[serde(default)]
    mismatch: Mismatch,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|row| row.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{name}: every row needs {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

impl TryFrom<EnvironmentDoc> for Environment {
    type Error = Error;

    fn try_from(doc: EnvironmentDoc) -> Result<Self> {
        let k = doc.r.len();
        let periods = doc.delta.len();
        Environment::from_parts(EnvironmentParts {
            features: from_rows(&doc.x, k, "X")?,
            loadings: from_rows(&doc.z, k, "Z")?,
            delta: doc.delta,
            weights: from_rows(&doc.w, periods, "W")?,
            factors: from_rows(&doc.m, periods, "M")?,
            effects: doc.r,
            sigma: doc.sigma,
            mismatch: doc.mismatch,
        })
    }
}

impl From<Environment> for EnvironmentDoc {
    fn from(env: Environment) -> Self {
        EnvironmentDoc {
            x: to_rows(&env.features),
            z: to_rows(&env.loadings),
            delta: env.delta,
            w: to_rows(&env.weights),
            m: to_rows(&env.factors),
            r: env.effects,
            sigma: env.sigma,
            mismatch: env.mismatch,
        }
    }
}
