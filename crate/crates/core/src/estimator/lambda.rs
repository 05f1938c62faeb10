use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sim::Environment;

const RANK_TOL: f64 = 1e-12;

fn split_factors(env: &Environment) -> (DMatrix<f64>, nalgebra::DVector<f64>) {
    let factors = env.latent().factors;
    let pre = factors.ncols() - 1;
    (factors.columns(0, pre).into_owned(), factors.column(pre).into_owned())
}

fn singular_range(pre: &DMatrix<f64>) -> (f64, f64) {
    let sv = pre.singular_values();
    let max = sv.max();
    let min = sv.min();
    (min, max)
}

fn ensure_full_row_rank(pre: &DMatrix<f64>) -> Result<()> {
    let (dz, pre_periods) = pre.shape();
    let deficient = Error::RankDeficientFactors {
        factor_dim: dz,
        pre_periods,
    };
    if pre_periods < dz {
        return Err(deficient);
    }
    let (min, max) = singular_range(pre);
    if max <= 0.0 || !max.is_finite() || min <= RANK_TOL * max {
        return Err(deficient);
    }
    Ok(())
}

/// Ideal factor effect parameter `||M_pre^T (M_pre M_pre^T)^-1 mu_T||^2`.
///
/// With the thin SVD `M_pre = U S V^T` the right inverse is `V S^-1 U^T`,
/// so the value is `sum_k (u_k . mu_T / s_k)^2`. Reads latent factors, so
/// only the harness should call it.
pub fn lambda_oracle(env: &Environment) -> Result<f64> {
    let (pre, last) = split_factors(env);
    ensure_full_row_rank(&pre)?;
    let svd = pre.svd(true, false);
    let u = svd.u.as_ref().expect("U requested");
    Ok(svd
        .singular_values
        .iter()
        .enumerate()
        .map(|(k, s)| (u.column(k).dot(&last) / s).powi(2))
        .sum())
}

/// Diagnostic upper bound `(||mu_T|| / s_min(M_pre))^2` on the oracle value.
pub fn lambda_upper_bound(env: &Environment) -> Result<f64> {
    let (pre, last) = split_factors(env);
    ensure_full_row_rank(&pre)?;
    let (min, _) = singular_range(&pre);
    Ok((last.norm() / min).powi(2))
}
