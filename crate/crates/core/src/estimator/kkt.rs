//! Equality-constrained QP for synthetic weights.
//!
//! With `sigma` factored out, the variance bound of weights `beta` for
//! target `i` is
//!
//! ```text
//! u(beta) = 1/n_i^(1) + sum_j beta_j^2 / n_j^(0) + lambda * sum_j (beta_j - [j = i])^2 / n_j
//! ```
//!
//! which is a separable quadratic `sum_j q_j beta_j^2 - 2 g_i beta_i + const`
//! with `q_j = 1/n_j^(0) + lambda/n_j` and `g_i = lambda/n_i`. The feasible set
//! is `A beta = a_i`, where column `a_j = [x_j; yhat_{j,pre}; 1]`.
//!
//! Stationarity of the KKT system gives `beta = Q^-1 (g - A^T nu)`; eliminating
//! `beta` leaves the `m x m` system
//!
//! ```text
//! (A Q^-1 A^T) nu = A Q^-1 g - a_i = -(h_i / n_i^(0)) a_i,   h_j = 1/q_j
//! ```
//!
//! The right-hand side always lies in the range of `A Q^-1 A^T` because the
//! indicator of `i` is feasible, so a rank-revealing (diagonally pivoted)
//! Cholesky factorisation handles redundant or nearly collinear constraint
//! rows: dependent rows are dropped and `A^T nu` is still unique.
//!
//! Subpopulations that have never been sampled, or have no control samples,
//! are pinned to `beta_j = 0`.

use crate::error::{Error, Result};
use crate::sim::Group;

use super::state::{CountView, TrialState};

/// Residual tolerance on the feature and pre-treatment rows.
pub const CONSTRAINT_TOL: f64 = 1e-6;
/// Residual tolerance on `sum(beta) = 1`.
pub const SUM_TOL: f64 = 1e-8;
/// Pivots below this fraction of the largest diagonal count as zero.
const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) struct QpSolution {
    pub beta: Vec<f64>,
    /// Bound with `sigma = 1`.
    pub unit_objective: f64,
    pub fallback: bool,
}

/// Verifies the counts needed to evaluate anything about target `i`.
pub(crate) fn check_target(state: &TrialState, i: usize, counts: &CountView<'_>) -> Result<()> {
    state.check(i)?;
    if counts.len() != state.subpopulations() {
        return Err(Error::Dimension("count matrix does not match the number of subpopulations".into()));
    }
    for group in Group::BOTH {
        if counts.get(i, group) == 0 {
            return Err(Error::UndefinedMean {
                subpopulation: i,
                group,
            });
        }
    }
    if state.total(i) == 0 {
        return Err(Error::UndefinedMean {
            subpopulation: i,
            group: Group::Control,
        });
    }
    Ok(())
}

/// Unit-sigma variance bound of `beta` for target `i`. Callers guarantee
/// the counts touched by nonzero coefficients are positive.
pub(crate) fn unit_bound(beta: &[f64], i: usize, lambda: f64, counts: &CountView<'_>) -> f64 {
    let mut epistemic = 0.0;
    let mut representation = 0.0;
    for (j, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            epistemic += b * b / counts.get(j, Group::Control) as f64;
        }
        let dev = if j == i { b - 1.0 } else { b };
        if dev != 0.0 {
            representation += dev * dev / counts.total(j) as f64;
        }
    }
    1.0 / counts.get(i, Group::Treatment) as f64 + epistemic + lambda * representation
}

pub(crate) fn indicator(k: usize, i: usize) -> Vec<f64> {
    let mut beta = vec![0.0; k];
    beta[i] = 1.0;
    beta
}

/// `A H A^T` factored once for a fixed count matrix. It does not depend on
/// the target, so every target under the same counts shares it.
pub(crate) struct KktSystem<'a> {
    state: &'a TrialState,
    counts: CountView<'a>,
    lambda: f64,
    /// `h_j = 1/q_j` for active `j`, 0 for pinned coordinates.
    h: Vec<f64>,
    factor: Option<(PivotedCholesky, Vec<f64>)>,
}

impl<'a> KktSystem<'a> {
    pub(crate) fn new(state: &'a TrialState, lambda: f64, counts: CountView<'a>) -> Self {
        let k = state.subpopulations();
        let m = state.constraint_dim();
        let mut h = vec![0.0; k];
        for (j, hj) in h.iter_mut().enumerate() {
            let n0 = counts.get(j, Group::Control);
            if state.total(j) == 0 || n0 == 0 {
                continue;
            }
            let q = 1.0 / n0 as f64 + lambda / counts.total(j) as f64;
            *hj = 1.0 / q;
        }

        // Lower triangle of S = A H A^T, row-major m x m.
        let mut s = vec![0.0; m * m];
        for (j, &hj) in h.iter().enumerate() {
            if hj == 0.0 {
                continue;
            }
            let a = state.constraint_column(j);
            for r in 0..m {
                let w = hj * a[r];
                let row = &mut s[r * m..r * m + r + 1];
                for (c, entry) in row.iter_mut().enumerate() {
                    *entry += w * a[c];
                }
            }
        }
        let factor = PivotedCholesky::factor(&mut s, m).map(|chol| (chol, s));
        KktSystem {
            state,
            counts,
            lambda,
            h,
            factor,
        }
    }

    pub(crate) fn counts(&self) -> &CountView<'a> {
        &self.counts
    }

    /// Solves for target `i`; the caller has run [`check_target`].
    pub(crate) fn solve_target(&self, i: usize) -> Result<QpSolution> {
        let (state, counts, lambda) = (self.state, &self.counts, self.lambda);
        let Some((chol, l)) = &self.factor else {
            return Ok(fallback(state, i, lambda, counts));
        };
        let a_i = state.constraint_column(i);
        let scale = -self.h[i] / counts.get(i, Group::Control) as f64;
        let mut nu: Vec<f64> = a_i.iter().map(|v| scale * v).collect();
        chol.solve(l, &mut nu);

        let g_i = lambda / counts.total(i) as f64;
        let mut beta = vec![0.0; state.subpopulations()];
        for (j, b) in beta.iter_mut().enumerate() {
            if self.h[j] == 0.0 {
                continue;
            }
            let a = state.constraint_column(j);
            let at_nu: f64 = a.iter().zip(&nu).map(|(x, y)| x * y).sum();
            let g = if j == i { g_i } else { 0.0 };
            *b = self.h[j] * (g - at_nu);
        }

        if !satisfies_constraints(state, i, &beta) {
            return Ok(fallback(state, i, lambda, counts));
        }

        Ok(QpSolution {
            unit_objective: unit_bound(&beta, i, lambda, counts),
            beta,
            fallback: false,
        })
    }
}

fn fallback(state: &TrialState, i: usize, lambda: f64, counts: &CountView<'_>) -> QpSolution {
    let beta = indicator(state.subpopulations(), i);
    QpSolution {
        unit_objective: unit_bound(&beta, i, lambda, counts),
        beta,
        fallback: true,
    }
}

/// Largest absolute residual of `A beta - a_i` over the feature and
/// pre-treatment rows, and the residual of the sum row.
pub(crate) fn constraint_residuals(state: &TrialState, i: usize, beta: &[f64]) -> (f64, f64) {
    let m = state.constraint_dim();
    let mut res: Vec<f64> = state.constraint_column(i).iter().map(|v| -v).collect();
    for (j, &b) in beta.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        for (r, a) in res.iter_mut().zip(state.constraint_column(j)) {
            *r += b * a;
        }
    }
    let rows = res[..m - 1].iter().fold(0.0f64, |acc, r| acc.max(r.abs()));
    (rows, res[m - 1].abs())
}

fn satisfies_constraints(state: &TrialState, i: usize, beta: &[f64]) -> bool {
    if beta.iter().any(|b| !b.is_finite()) {
        return false;
    }
    let (rows, sum) = constraint_residuals(state, i, beta);
    rows <= CONSTRAINT_TOL && sum <= SUM_TOL
}

/// `P^T S P = L L^T` with complete diagonal pivoting, truncated at the
/// numerical rank. `L` overwrites the lower triangle of `S`.
struct PivotedCholesky {
    m: usize,
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedCholesky {
    fn factor(s: &mut [f64], m: usize) -> Option<Self> {
        let mut perm: Vec<usize> = (0..m).collect();
        let max_diag = (0..m).map(|d| s[d * m + d]).fold(0.0f64, f64::max);
        if max_diag <= 0.0 || !max_diag.is_finite() {
            return None;
        }
        let tol = max_diag * PIVOT_TOL;
        let mut rank = m;
        for kk in 0..m {
            let (p, &best) = (kk..m)
                .map(|d| (d, &s[d * m + d]))
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty pivot range");
            if best <= tol {
                rank = kk;
                break;
            }
            if p != kk {
                swap_symmetric(s, m, kk, p);
                perm.swap(kk, p);
            }
            let d = s[kk * m + kk].sqrt();
            s[kk * m + kk] = d;
            for r in kk + 1..m {
                s[r * m + kk] /= d;
            }
            for r in kk + 1..m {
                let lr = s[r * m + kk];
                for c in kk + 1..=r {
                    s[r * m + c] -= lr * s[c * m + kk];
                }
            }
        }
        if rank == 0 {
            return None;
        }
        Some(PivotedCholesky { m, perm, rank })
    }

    /// Solves the consistent system in place; components outside the
    /// numerical range are set to zero.
    fn solve(&self, l: &[f64], rhs: &mut [f64]) {
        let m = self.m;
        let r = self.rank;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| rhs[p]).collect();
        for row in 0..r {
            let mut acc = y[row];
            for c in 0..row {
                acc -= l[row * m + c] * y[c];
            }
            y[row] = acc / l[row * m + row];
        }
        for row in (0..r).rev() {
            let mut acc = y[row];
            for c in row + 1..r {
                acc -= l[c * m + row] * y[c];
            }
            y[row] = acc / l[row * m + row];
        }
        for v in &mut y[r..] {
            *v = 0.0;
        }
        for (slot, &p) in self.perm.iter().enumerate() {
            rhs[p] = y[slot];
        }
    }
}

/// Swaps index `a < b` in a symmetric matrix stored in the lower triangle.
fn swap_symmetric(s: &mut [f64], m: usize, a: usize, b: usize) {
    let at = |r: usize, c: usize| if r >= c { r * m + c } else { c * m + r };
    s.swap(a * m + a, b * m + b);
    for c in 0..m {
        if c == a || c == b {
            continue;
        }
        s.swap(at(a, c), at(b, c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn full_from_lower(s: &[f64], m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |r, c| if r >= c { s[r * m + c] } else { s[c * m + r] })
    }

    #[test]
    fn pivoted_cholesky_reconstructs_spd() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 9.0]);
        let mut s: Vec<f64> = (0..9).map(|idx| a[(idx / 3, idx % 3)]).collect();
        let chol = PivotedCholesky::factor(&mut s, 3).unwrap();
        assert_eq!(chol.rank, 3);
        let b = [1.0, -2.0, 0.5];
        let mut x = b.to_vec();
        chol.solve(&s, &mut x);
        let ax = &a * nalgebra::DVector::from_vec(x);
        for r in 0..3 {
            assert!((ax[r] - b[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn pivoted_cholesky_handles_rank_deficiency() {
        // rank-2: third row = first + second
        let v = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, 2.0]);
        let a = &v * v.transpose();
        let mut s: Vec<f64> = (0..9).map(|idx| a[(idx / 3, idx % 3)]).collect();
        let chol = PivotedCholesky::factor(&mut s, 3).unwrap();
        assert_eq!(chol.rank, 2);
        // consistent rhs = A * (1, 1, 1)
        let b = &a * nalgebra::DVector::from_element(3, 1.0);
        let mut x: Vec<f64> = b.iter().copied().collect();
        chol.solve(&s, &mut x);
        let ax = &a * nalgebra::DVector::from_vec(x);
        assert!((ax - b).amax() < 1e-10);
    }

    #[test]
    fn symmetric_swap_matches_permutation() {
        let a = DMatrix::from_fn(4, 4, |r, c| (1 + r.min(c)) as f64 * 10.0 + r.max(c) as f64);
        let mut s: Vec<f64> = (0..16).map(|idx| a[(idx / 4, idx % 4)]).collect();
        swap_symmetric(&mut s, 4, 1, 3);
        let mut expected = a.clone();
        expected.swap_rows(1, 3);
        expected.swap_columns(1, 3);
        let got = full_from_lower(&s, 4);
        assert_eq!(got, expected);
    }
}
