use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::policies::{warm_start_len, PolicyKind};
use crate::sim::{Mismatch, SimConfig};

/// Grid used by `lambda = "sweep"`: one point per decade from 10⁻³ to 10².
pub const DEFAULT_LAMBDA_SWEEP: [f64; 6] = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0];

/// How the factor-effect parameter is chosen for lambda-using policies.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaMode {
    /// Per-environment value computed from the latent factors.
    Oracle,
    Fixed(f64),
    /// One cell per listed value.
    Sweep(Vec<f64>),
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaMode::Oracle => f.write_str("oracle"),
            LambdaMode::Fixed(v) => write!(f, "{v}"),
            LambdaMode::Sweep(values) => {
                let parts: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                write!(f, "sweep[{}]", parts.join(","))
            }
        }
    }
}

impl FromStr for LambdaMode {
    type Err = Error;

    /// Accepts `oracle`, `sweep` (the default grid), or a number.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "oracle" => Ok(LambdaMode::Oracle),
            "sweep" => Ok(LambdaMode::Sweep(DEFAULT_LAMBDA_SWEEP.to_vec())),
            other => other
                .parse::<f64>()
                .map(LambdaMode::Fixed)
                .map_err(|_| Error::InvalidConfig(format!("lambda must be oracle, sweep or a number, got {s:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LambdaRepr {
    Value(f64),
    Name(String),
    Sweep { sweep: Vec<f64> },
}

impl Serialize for LambdaMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LambdaMode::Oracle => LambdaRepr::Name("oracle".into()),
            LambdaMode::Fixed(v) => LambdaRepr::Value(*v),
            LambdaMode::Sweep(values) => LambdaRepr::Sweep { sweep: values.clone() },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LambdaMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match LambdaRepr::deserialize(d)? {
            LambdaRepr::Value(v) => Ok(LambdaMode::Fixed(v)),
            LambdaRepr::Name(name) => name.parse().map_err(serde::de::Error::custom),
            LambdaRepr::Sweep { sweep } => Ok(LambdaMode::Sweep(sweep)),
        }
    }
}

fn default_horizon() -> usize {
    200
}
fn default_policies() -> Vec<PolicyKind> {
    PolicyKind::ALL.to_vec()
}
fn default_environments() -> usize {
    10
}
fn default_runs() -> usize {
    1000
}
fn default_lambda() -> LambdaMode {
    LambdaMode::Oracle
}
fn default_fallback() -> f64 {
    1.0
}
fn default_output() -> String {
    "out".into()
}

/// A full experiment: world, budget, policies and replication counts.
///
/// Loaded from TOML; the `[sim]` table mirrors [`SimConfig`] and its `seed`
/// is the master seed for every environment and run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default = "default_horizon", alias = "H")]
    pub horizon: usize,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "default_environments")]
    pub n_environments: usize,
    #[serde(default = "default_runs")]
    pub n_runs_per_environment: usize,
    #[serde(default = "default_lambda", alias = "lambda_mode")]
    pub lambda: LambdaMode,
    /// Used where the oracle is undefined (rank-deficient pre-treatment
    /// factors, e.g. the full-rank mismatch setting).
    #[serde(default = "default_fallback")]
    pub lambda_fallback: f64,
    #[serde(default = "default_output")]
    pub output_path: String,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            sim: SimConfig::default(),
            horizon: default_horizon(),
            policies: default_policies(),
            n_environments: default_environments(),
            n_runs_per_environment: default_runs(),
            lambda: default_lambda(),
            lambda_fallback: default_fallback(),
            output_path: default_output(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentSpec::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        let min = warm_start_len(self.sim.subpopulations);
        if self.horizon < min {
            return fail(format!("H >= 2K required, got H = {} < {min}", self.horizon));
        }
        if self.policies.is_empty() {
            return fail("at least one policy required".into());
        }
        if self.n_environments == 0 || self.n_runs_per_environment == 0 {
            return fail("n_environments and n_runs_per_environment must be >= 1".into());
        }
        let check = |v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidLambda(v))
            }
        };
        match &self.lambda {
            LambdaMode::Oracle => {}
            LambdaMode::Fixed(v) => check(*v)?,
            LambdaMode::Sweep(values) => {
                if values.is_empty() {
                    return fail("lambda sweep needs at least one value".into());
                }
                values.iter().try_for_each(|v| check(*v))?;
            }
        }
        check(self.lambda_fallback)
    }

    /// `regime` column of the CSV: the factor regime, plus the mismatch if any.
    pub fn regime_label(&self) -> String {
        match self.sim.mismatch {
            Mismatch::None => self.sim.factor_regime.name().to_string(),
            m => format!("{}/{}", self.sim.factor_regime.name(), m.name()),
        }
    }
}
