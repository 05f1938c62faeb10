use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::sim::{Environment, EnvironmentParts, Mismatch};

fn cfg(lambda: f64) -> EstimatorConfig {
    EstimatorConfig::new(lambda, 1.0).unwrap()
}

fn summaries(
    features: DMatrix<f64>,
    counts: &[[u32; 2]],
    final_means: &[[f64; 2]],
    pre_means: DMatrix<f64>,
) -> TrialState {
    TrialState::from_summaries(&features, counts, final_means, &pre_means).unwrap()
}

/// Random state with every count in `1..=max_count`.
fn random_state(rng: &mut ChaCha8Rng, k: usize, dx: usize, pre: usize, max_count: u32) -> TrialState {
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let features = DMatrix::from_fn(dx, k, |_, _| normal());
    let pre_means = DMatrix::from_fn(pre, k, |_, _| 2.0 * normal());
    let means: Vec<[f64; 2]> = (0..k).map(|_| [normal(), normal()]).collect();
    let counts: Vec<[u32; 2]> = (0..k)
        .map(|_| [rng.random_range(1..=max_count), rng.random_range(1..=max_count)])
        .collect();
    summaries(features, &counts, &means, pre_means)
}

/// Dense constraint matrix over all subpopulations: rows of features,
/// pre-treatment means and ones.
fn constraint_matrix(state: &TrialState) -> DMatrix<f64> {
    let k = state.subpopulations();
    let m = state.constraint_dim();
    DMatrix::from_fn(m, k, |r, c| {
        let dx = state.feature_dim();
        if r < dx {
            state.features_of(c)[r]
        } else if r < m - 1 {
            state.pre_means(c).unwrap()[r - dx]
        } else {
            1.0
        }
    })
}

/// Three-term bound with every count given explicitly.
fn bound_by_hand(beta: &[f64], i: usize, lambda: f64, n0: &[f64], n1_i: f64, n: &[f64]) -> f64 {
    let epistemic: f64 = beta.iter().zip(n0).map(|(b, n)| b * b / n).sum();
    let representation: f64 = beta
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let d = if j == i { b - 1.0 } else { *b };
            d * d / n[j]
        })
        .sum();
    1.0 / n1_i + epistemic + lambda * representation
}

fn unit_bound_dense(state: &TrialState, beta: &DVector<f64>, i: usize, lambda: f64) -> f64 {
    let counts = state.counts();
    let n0: Vec<f64> = counts.iter().map(|c| c[0] as f64).collect();
    let n: Vec<f64> = counts.iter().map(|c| (c[0] + c[1]) as f64).collect();
    bound_by_hand(beta.as_slice(), i, lambda, &n0, counts[i][1] as f64, &n)
}

/// Full KKT oracle: assemble the (K + m) indefinite system
/// `[2Q A^T; A 0] [beta; nu] = [2g; a_i]` and solve it by dense LU.
/// Requires `A` to have full row rank.
fn kkt_lu_minimum(state: &TrialState, i: usize, lambda: f64) -> (DVector<f64>, f64) {
    let k = state.subpopulations();
    let a = constraint_matrix(state);
    let m = a.nrows();
    let counts = state.counts();
    let mut kkt = DMatrix::zeros(k + m, k + m);
    let mut rhs = DVector::zeros(k + m);
    for j in 0..k {
        let n0 = counts[j][0] as f64;
        let n = (counts[j][0] + counts[j][1]) as f64;
        kkt[(j, j)] = 2.0 * (1.0 / n0 + lambda / n);
    }
    rhs[i] = 2.0 * lambda / (counts[i][0] + counts[i][1]) as f64;
    kkt.view_mut((0, k), (k, m)).copy_from(&a.transpose());
    kkt.view_mut((k, 0), (m, k)).copy_from(&a);
    for r in 0..m {
        rhs[k + r] = a[(r, i)];
    }
    let sol = kkt.lu().solve(&rhs).expect("nonsingular KKT matrix");
    let beta = sol.rows(0, k).into_owned();
    let v = unit_bound_dense(state, &beta, i, lambda);
    (beta, v)
}

/// Projection of `v` onto the null space of `A`.
fn project_to_null_space(a: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let gram = a * a.transpose();
    let y = gram.lu().solve(&(a * v)).unwrap();
    v - a.transpose() * y
}

#[test]
fn naive_estimate_examples() {
    let x = DMatrix::zeros(1, 2);
    let s = summaries(x.clone(), &[[1, 1], [2, 2]], &[[1.0, 2.5], [0.7, 0.7]], DMatrix::zeros(1, 2));
    assert_eq!(naive_estimate(&s, 0).unwrap(), 1.5);
    assert_eq!(naive_estimate(&s, 1).unwrap(), 0.0);

    let s = summaries(x, &[[0, 1], [2, 2]], &[[0.0, 2.5], [0.7, 0.7]], DMatrix::zeros(1, 2));
    assert!(matches!(
        naive_estimate(&s, 0),
        Err(Error::UndefinedMean { subpopulation: 0, group: Group::Control })
    ));
}

#[test]
fn variance_bound_examples() {
    let x = DMatrix::zeros(1, 2);
    let pre = DMatrix::zeros(1, 2);
    let s = summaries(x.clone(), &[[4, 5], [1, 1]], &[[0.0; 2]; 2], pre.clone());
    let trivial = Weights::trivial(&s, 0, &cfg(3.0)).unwrap();
    assert_eq!(variance_bound(&trivial, &s, &cfg(3.0), None).unwrap(), 0.45);

    // lambda = 0 drops the representation term
    let s = summaries(x.clone(), &[[2, 4], [2, 1]], &[[0.0; 2]; 2], pre.clone());
    let half = Weights {
        beta: vec![0.5, 0.5],
        target: 0,
        objective_value: f64::NAN,
        fallback: false,
    };
    assert_eq!(variance_bound(&half, &s, &cfg(0.0), None).unwrap(), 0.5);

    // lambda = 1 with n = (6, 3): 0.5 + 0.25/6 + 0.25/3
    let v = variance_bound(&half, &s, &cfg(1.0), None).unwrap();
    let by_hand = bound_by_hand(&[0.5, 0.5], 0, 1.0, &[2.0, 2.0], 4.0, &[6.0, 3.0]);
    assert!((v - by_hand).abs() < 1e-15);
    assert!((v - (0.5 + 0.25 / 6.0 + 0.25 / 3.0)).abs() < 1e-15);
    // the three-term formula itself, with total counts supplied separately
    assert!((bound_by_hand(&[0.5, 0.5], 0, 1.0, &[2.0, 2.0], 4.0, &[4.0, 4.0]) - 0.625).abs() < 1e-15);

    // sigma enters as a common factor
    let scaled = variance_bound(&half, &s, &EstimatorConfig::new(1.0, 2.0).unwrap(), None).unwrap();
    assert!((scaled - 4.0 * v).abs() < 1e-14);
}

#[test]
fn variance_bound_errors() {
    let x = DMatrix::zeros(1, 2);
    let s = summaries(x, &[[2, 0], [0, 3]], &[[0.0; 2]; 2], DMatrix::zeros(1, 2));
    let half = Weights {
        beta: vec![0.5, 0.5],
        target: 0,
        objective_value: 0.0,
        fallback: false,
    };
    assert!(matches!(variance_bound(&half, &s, &cfg(1.0), None), Err(Error::UndefinedMean { .. })));
    let counts = [[2, 1], [0, 3]];
    let err = variance_bound(&half, &s, &cfg(1.0), Some(CountView::new(&counts))).unwrap_err();
    assert!(matches!(err, Error::UndefinedMean { subpopulation: 1, group: Group::Control }));
    assert!(matches!(EstimatorConfig::new(-0.1, 1.0), Err(Error::InvalidLambda(_))));
}

#[test]
fn phantom_override_matches_explicit_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = random_state(&mut rng, 6, 1, 2, 4);
    let mut bumped = s.counts().to_vec();
    bumped[2][1] += 1;
    let a = solve_beta(&s, 0, &cfg(0.7), Some(CountView::observed(&s).with_phantom(2, Group::Treatment))).unwrap();
    let b = solve_beta(&s, 0, &cfg(0.7), Some(CountView::new(&bumped))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn two_subpopulation_worked_qp() {
    // No features, no pre-treatment rows: only sum(beta) = 1 binds.
    let s = summaries(
        DMatrix::zeros(0, 2),
        &[[1, 1], [1, 1]],
        &[[0.0; 2]; 2],
        DMatrix::zeros(0, 2),
    );
    let w = solve_beta(&s, 0, &cfg(1.0), None).unwrap();
    assert!(!w.fallback);
    assert!((w.beta[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((w.beta[1] - 1.0 / 3.0).abs() < 1e-12);
    // V = 1 + (4/9 + 1/9) + (1/9 + 1/9)/2
    assert!((w.objective_value - (1.0 + 5.0 / 9.0 + 1.0 / 9.0)).abs() < 1e-12);
}

#[test]
fn fully_determined_constraints_recover_naive() {
    // K = 3 and three linearly independent constraint rows.
    let features = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 3.0]);
    let pre = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
    let s = summaries(features, &[[2, 3], [1, 4], [5, 2]], &[[0.1, 0.9], [0.3, 0.2], [-0.4, 1.0]], pre);
    for i in 0..3 {
        let w = solve_beta(&s, i, &cfg(0.5), None).unwrap();
        assert!(!w.fallback);
        let indicator = kkt::indicator(3, i);
        for (b, e) in w.beta.iter().zip(&indicator) {
            assert!((b - e).abs() < 1e-9, "{:?}", w.beta);
        }
    }
    let w = Weights::trivial(&s, 1, &cfg(0.5)).unwrap();
    assert_eq!(synthetic_estimate(&s, &w).unwrap(), naive_estimate(&s, 1).unwrap());
}

#[test]
fn synthetic_estimate_examples() {
    let s = summaries(
        DMatrix::zeros(1, 2),
        &[[1, 1], [1, 1]],
        &[[1.0, 4.0], [3.0, -2.0]],
        DMatrix::zeros(1, 2),
    );
    let half = Weights {
        beta: vec![0.5, 0.5],
        target: 0,
        objective_value: 0.0,
        fallback: false,
    };
    assert_eq!(synthetic_estimate(&s, &half).unwrap(), 2.0);
    let trivial = Weights::trivial(&s, 1, &cfg(1.0)).unwrap();
    assert_eq!(synthetic_estimate(&s, &trivial).unwrap(), naive_estimate(&s, 1).unwrap());
}

#[test]
fn sensitivity_examples() {
    let fit = SyntheticFit {
        weights: Weights {
            beta: vec![1.0],
            target: 0,
            objective_value: 0.25,
            fallback: false,
        },
        estimate: -1.5,
    };
    assert_eq!(fit.sensitivity(), 3.0);

    let s = summaries(DMatrix::zeros(1, 2), &[[2, 2], [3, 1]], &[[1.0, 1.0], [0.0, 2.0]], DMatrix::zeros(1, 2));
    // identical pre-treatment columns, so constraints reduce to x and the sum
    let w = solve_beta(&s, 0, &cfg(1.0), None).unwrap();
    let r = synthetic_estimate(&s, &w).unwrap();
    let si = sensitivity_index(&s, 0, &cfg(1.0)).unwrap();
    assert!((si - r.abs() / w.objective_value.sqrt()).abs() < 1e-15);

    let zero = summaries(DMatrix::zeros(0, 2), &[[1, 1], [1, 1]], &[[0.5, 0.5], [0.5, 0.5]], DMatrix::zeros(0, 2));
    assert_eq!(sensitivity_index(&zero, 0, &cfg(1.0)).unwrap(), 0.0);
    assert_eq!(naive_sensitivity(&zero, 1).unwrap(), 0.0);
}

#[test]
fn small_instances_match_kkt_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for case in 0..200 {
        let k = rng.random_range(3..=5);
        let (dx, pre) = match rng.random_range(0..3) {
            0 => (1, 0),
            1 => (0, 1),
            _ => (1, 1),
        };
        if dx + pre + 1 >= k {
            continue;
        }
        let s = random_state(&mut rng, k, dx, pre, 6);
        let lambda = 10f64.powf(rng.random_range(-3.0..2.0));
        let i = rng.random_range(0..k);
        let w = solve_beta(&s, i, &cfg(lambda), None).unwrap();
        let (beta_ref, v_ref) = kkt_lu_minimum(&s, i, lambda);
        assert!(!w.fallback, "case {case}");
        assert!((w.objective_value - v_ref).abs() < 1e-6, "case {case}: {} vs {}", w.objective_value, v_ref);
        for (a, b) in w.beta.iter().zip(beta_ref.iter()) {
            assert!((a - b).abs() < 1e-6, "case {case}");
        }
        // no feasible direction improves on the returned weights
        let a = constraint_matrix(&s);
        let beta = DVector::from_vec(w.beta.clone());
        for _ in 0..20 {
            let r = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let d = project_to_null_space(&a, &r);
            for eps in [1e-3, 1e-1] {
                let v = unit_bound_dense(&s, &(&beta + &d * eps), i, lambda);
                assert!(v >= w.objective_value - 1e-12, "case {case}: perturbation improved");
            }
        }
        checked += 1;
    }
    assert!(checked >= 100, "only {checked} instances exercised");
}

#[test]
fn inactive_subpopulations_are_pinned() {
    let s = summaries(
        DMatrix::zeros(0, 3),
        &[[1, 1], [0, 0], [0, 2]],
        &[[0.0; 2]; 3],
        DMatrix::zeros(0, 3),
    );
    let w = solve_beta(&s, 0, &cfg(1.0), None).unwrap();
    assert_eq!(w.beta, vec![1.0, 0.0, 0.0]);
    assert!(matches!(solve_beta(&s, 1, &cfg(1.0), None), Err(Error::UndefinedMean { .. })));
}

#[test]
fn huge_lambda_returns_indicator() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = random_state(&mut rng, 25, 2, 4, 5);
    for i in 0..25 {
        let w = solve_beta(&s, i, &cfg(1e6), None).unwrap();
        let dev: f64 = w.beta.iter().enumerate().map(|(j, b)| (b - if j == i { 1.0 } else { 0.0 }).abs()).sum();
        assert!(dev < 1e-4, "deviation {dev}");
    }
}

fn env_with_factors(factors: DMatrix<f64>) -> Environment {
    let dz = factors.nrows();
    let periods = factors.ncols();
    Environment::from_parts(EnvironmentParts {
        features: DMatrix::zeros(1, 3),
        loadings: DMatrix::zeros(dz, 3),
        delta: vec![0.0; periods],
        weights: DMatrix::zeros(1, periods),
        factors,
        effects: vec![0.0; 3],
        sigma: 1.0,
        mismatch: Mismatch::None,
    })
    .unwrap()
}

/// Minimum-norm solution of `M_pre u = mu_T` through a QR factorisation of
/// `M_pre^T`: `u = Q R^-T mu_T`.
fn min_norm_by_qr(pre: &DMatrix<f64>, last: &DVector<f64>) -> DVector<f64> {
    let qr = pre.transpose().qr();
    let r = qr.r();
    let y = r.transpose().solve_lower_triangular(last).unwrap();
    qr.q() * y
}

#[test]
fn lambda_oracle_scalar_and_zero() {
    let env = env_with_factors(DMatrix::from_row_slice(1, 2, &[2.0, 1.0]));
    assert!((lambda_oracle(&env).unwrap() - 0.25).abs() < 1e-15);
    let env = env_with_factors(DMatrix::from_row_slice(1, 3, &[2.0, -1.0, 0.0]));
    assert_eq!(lambda_oracle(&env).unwrap(), 0.0);
}

#[test]
fn lambda_oracle_matches_qr_route() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let dz = rng.random_range(1..=3);
        let periods = rng.random_range(dz + 1..=dz + 4);
        let factors = DMatrix::from_fn(dz, periods, |_, _| rng.sample::<f64, _>(StandardNormal));
        let env = env_with_factors(factors.clone());
        let pre = factors.columns(0, periods - 1).into_owned();
        let last = factors.column(periods - 1).into_owned();
        let expected = min_norm_by_qr(&pre, &last).norm_squared();
        let got = lambda_oracle(&env).unwrap();
        assert!((got - expected).abs() < 1e-8 * expected.max(1.0), "{got} vs {expected}");
        assert!(got <= lambda_upper_bound(&env).unwrap() * (1.0 + 1e-12));
    }
}

#[test]
fn lambda_oracle_rejects_rank_deficiency() {
    // D_z = T: more factors than pre-treatment periods
    let env = env_with_factors(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    assert!(matches!(lambda_oracle(&env), Err(Error::RankDeficientFactors { .. })));
    // collinear pre-treatment factors
    let env = env_with_factors(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.3, 2.0, 4.0, 0.1]));
    assert!(matches!(lambda_oracle(&env), Err(Error::RankDeficientFactors { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solved_weights_dominate_and_are_feasible(seed in any::<u64>(), k in 4usize..30, lambda_exp in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&mut rng, k, 1, 2.min(k - 3), 8);
        let c = cfg(10f64.powf(lambda_exp));
        for i in 0..k {
            let w = solve_beta(&s, i, &c, None).unwrap();
            let trivial = Weights::trivial(&s, i, &c).unwrap();
            prop_assert!(w.objective_value <= trivial.objective_value + 1e-9);
            let (rows, sum) = w.constraint_residuals(&s);
            prop_assert!(rows <= CONSTRAINT_TOL && sum <= SUM_TOL);
            let v = variance_bound(&w, &s, &c, None).unwrap();
            prop_assert!((v - w.objective_value).abs() <= 1e-12 * v);
        }
    }

    #[test]
    fn trivial_weights_reproduce_naive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&mut rng, 7, 2, 3, 9);
        let sigma = rng.random_range(0.1..5.0);
        let c = EstimatorConfig::new(rng.random_range(0.0..10.0), sigma).unwrap();
        for i in 0..7 {
            let w = Weights::trivial(&s, i, &c).unwrap();
            prop_assert_eq!(synthetic_estimate(&s, &w).unwrap(), naive_estimate(&s, i).unwrap());
            let n0 = s.count(i, Group::Control) as f64;
            let n1 = s.count(i, Group::Treatment) as f64;
            prop_assert_eq!(variance_bound(&w, &s, &c, None).unwrap(), sigma * sigma * (1.0 / n0 + 1.0 / n1));
        }
    }

    #[test]
    fn sigma_scaling_preserves_weights_and_ranks(seed in any::<u64>(), pow in -3i32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&mut rng, 12, 2, 3, 6);
        let c1 = EstimatorConfig::new(0.4, 1.0).unwrap();
        let scale = 2f64.powi(pow);
        let c2 = EstimatorConfig::new(0.4, scale).unwrap();
        for i in 0..12 {
            let a = fit(&s, i, &c1).unwrap();
            let b = fit(&s, i, &c2).unwrap();
            prop_assert_eq!(&a.weights.beta, &b.weights.beta);
            prop_assert!((b.sensitivity() - a.sensitivity() / scale).abs() <= 1e-12 * a.sensitivity().max(1e-300));
        }
    }
}


#[test]
fn shared_factorisation_matches_per_target_solves() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let s = random_state(&mut rng, 8, 2, 3, 5);
        let c = cfg(0.7);
        let all = fit_all(&s, &c).unwrap();
        for (i, f) in all.iter().enumerate() {
            assert_eq!(f, &fit(&s, i, &c).unwrap());
        }
        let view = CountView::observed(&s).with_phantom(3, Group::Treatment);
        let solver = WeightSolver::new(&s, &c, Some(view)).unwrap();
        for i in 0..8 {
            assert_eq!(solver.solve(i).unwrap(), solve_beta(&s, i, &c, Some(view)).unwrap());
        }
    }
}
