//! Property tests for invariants that span modules.

use distboot::bootstrap::{dist_boots, BootMethod, BootstrapSpec};
use distboot::cluster::{shard, Cluster};
use distboot::csl::{run_algorithm1, CrossValidation, FixedLambdas};
use distboot::glm::{self, DataBlock, LossFamily};
use distboot::harness::simultaneous_coverage;
use distboot::nodewise::node;
use distboot::numeric::Matrix;
use distboot::rng::{derive_stream, Purpose, RngKey, Stream};
use distboot::solver::{solve, solve_from, PenalizedProblem, SolverConfig};
use proptest::prelude::*;

fn stream(seed: u64) -> Stream {
    derive_stream(RngKey::new(seed, Purpose::Misc))
}

fn gaussian(s: &mut Stream, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| s.standard_normal())
}

fn linear_data(seed: u64, rows: usize, d: usize) -> (Matrix, Vec<f64>) {
    let mut s = stream(seed);
    let x = gaussian(&mut s, rows, d);
    let y = (0..rows)
        .map(|i| x.get(i, 0) - x.get(i, d - 1) + 0.5 * s.standard_normal())
        .collect();
    (x, y)
}

fn logistic_data(seed: u64, rows: usize, d: usize) -> (Matrix, Vec<f64>) {
    let (x, z) = linear_data(seed, rows, d);
    let y = z.into_iter().map(|v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    (x, y)
}

fn family_data(family: LossFamily, seed: u64, rows: usize, d: usize) -> (Matrix, Vec<f64>) {
    match family {
        LossFamily::Linear => linear_data(seed, rows, d),
        LossFamily::Logistic => logistic_data(seed, rows, d),
    }
}

fn families() -> impl Strategy<Value = LossFamily> {
    prop_oneof![Just(LossFamily::Linear), Just(LossFamily::Logistic)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn second_derivative_is_bounded(y in 0.0f64..=1.0, b in -40.0f64..40.0) {
        let h = LossFamily::Logistic.d2(y, b);
        prop_assert!(h >= 0.0 && h <= 0.25);
        prop_assert_eq!(LossFamily::Linear.d2(y, b), 1.0);
    }

    #[test]
    fn solution_permutes_with_coordinates(seed in 0u64..1000, family in families(), lambda in 0.02f64..0.2) {
        let d = 6;
        let (x, y) = family_data(family, seed, 60, d);
        let perm: Vec<usize> = (0..d).rev().collect();
        let xp = Matrix::from_fn(60, d, |i, j| x.get(i, perm[j]));
        let block = DataBlock::new(x, y.clone()).unwrap();
        let permuted = DataBlock::new(xp, y).unwrap();
        let cfg = SolverConfig::default().with_tol(1e-10);
        let a = solve(&PenalizedProblem::glm(family, &block, lambda), &cfg).unwrap();
        let b = solve(&PenalizedProblem::glm(family, &permuted, lambda), &cfg).unwrap();
        for j in 0..d {
            prop_assert!((b.theta_hat[j] - a.theta_hat[perm[j]]).abs() < 1e-7);
        }
    }

    #[test]
    fn warm_start_reaches_same_point(seed in 0u64..1000, family in families(), lambda in 0.02f64..0.2) {
        let d = 8;
        let (x, y) = family_data(family, seed, 80, d);
        let block = DataBlock::new(x, y).unwrap();
        let cfg = SolverConfig::default();
        let problem = PenalizedProblem::glm(family, &block, lambda);
        let cold = solve(&problem, &cfg).unwrap();
        let mut s = stream(seed + 1);
        let start: Vec<f64> = cold.theta_hat.iter().map(|v| v + 0.3 * s.standard_normal()).collect();
        let warm = solve_from(&problem, &cfg, &start).unwrap();
        prop_assert!(cold.converged && warm.converged);
        // Both satisfy the KKT conditions; strong convexity bounds the gap.
        for (a, b) in cold.theta_hat.iter().zip(&warm.theta_hat) {
            prop_assert!((a - b).abs() <= 10.0 * cfg.tol.max(1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn nodewise_diagonal_is_reciprocal_tau(seed in 0u64..1000, lambda in 0.0f64..0.3) {
        let mut s = stream(seed);
        let x = gaussian(&mut s, 40, 6);
        let m = x.gram().scaled(1.0 / 40.0);
        let res = node(&m, &[lambda; 6], &SolverConfig::default()).unwrap();
        for l in 0..6 {
            prop_assert_eq!(res.theta_inv.get(l, l), 1.0 / res.tau_sq[l]);
        }
    }

    #[test]
    fn ledger_is_two_tau_k_minus_one_d(k in 1usize..6, d in 2usize..6, tau in 1usize..4) {
        let (x, y) = linear_data(k as u64 * 31 + d as u64, 20 * k, d);
        let data = shard(&x, &y, k).unwrap();
        let policy = FixedLambdas { initial: 0.05, nodewise: 0.05, rounds: vec![] };
        let ledger = run_algorithm1(&data, LossFamily::Linear, tau, &policy, &SolverConfig::default())
            .unwrap()
            .ledger;
        prop_assert_eq!(ledger.rounds, tau as u64);
        prop_assert_eq!(ledger.floats_up + ledger.floats_down, (2 * tau * (k - 1) * d) as u64);
        prop_assert_eq!(ledger.moment_floats_up, 0);
    }

    #[test]
    fn coverage_formulations_agree(seed in 0u64..500, shift in -0.3f64..0.3) {
        let (x, y) = linear_data(seed, 120, 5);
        let data = shard(&x, &y, 4).unwrap();
        let policy = FixedLambdas { initial: 0.05, nodewise: 0.05, rounds: vec![0.02] };
        let state = run_algorithm1(&data, LossFamily::Linear, 2, &policy, &SolverConfig::default()).unwrap();
        let spec = BootstrapSpec { b: 100, ..BootstrapSpec::new(BootMethod::KGrad, RngKey::new(seed, Purpose::Multiplier)) };
        let result = dist_boots(&spec, &state).unwrap();
        let target: Vec<f64> = result.center.iter().enumerate().map(|(l, c)| c + shift * (l as f64 - 2.0) / 2.0).collect();
        let by_norm = result.sup_statistic(&target).unwrap() <= result.c_alpha;
        prop_assert_eq!(by_norm, result.covers(&target));
        prop_assert_eq!(simultaneous_coverage(&result, &target).unwrap(), by_norm);
    }
}

#[test]
fn nodewise_residual_shrinks_with_lambda() {
    let mut s = stream(77);
    let x = gaussian(&mut s, 400, 8);
    let m = x.gram().scaled(1.0 / 400.0);
    let residual = |lambda: f64| {
        let inv = node(&m, &[lambda; 8], &SolverConfig::default().with_tol(1e-10)).unwrap().theta_inv;
        inv.matmul(&m).sub(&Matrix::identity(8)).as_slice().iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    };
    let values: Vec<f64> = [0.2, 0.1, 0.05, 0.01, 0.0].iter().map(|&l| residual(l)).collect();
    assert!(values.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{values:?}");
    assert!(values[4] < 1e-6);
}

#[test]
fn parallel_gradients_match_serial() {
    let (x, y) = logistic_data(5, 400, 7);
    let data = shard(&x, &y, 8).unwrap();
    let theta = vec![0.1, -0.2, 0.0, 0.3, 0.0, 0.05, -0.1];
    let mut cluster = Cluster::new(&data, LossFamily::Logistic).unwrap();
    let parallel = cluster.gather_gradients(&theta).unwrap();
    for (j, g) in parallel.local.iter().enumerate() {
        assert_eq!(g, &glm::grad(LossFamily::Logistic, &data.shards[j], &theta).unwrap());
    }
    let pooled = glm::grad(LossFamily::Logistic, &data.pooled(), &theta).unwrap();
    for (a, b) in parallel.mean.iter().zip(&pooled) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cross_validation_adds_no_traffic() {
    let (x, y) = linear_data(9, 8 * 60, 10);
    let data = shard(&x, &y, 8).unwrap();
    let state = run_algorithm1(&data, LossFamily::Linear, 3, &CrossValidation::default(), &SolverConfig::default()).unwrap();
    assert_eq!(state.ledger.floats_up, 3 * 7 * 10);
    assert_eq!(state.ledger.floats_down, 3 * 7 * 10);
}

#[test]
fn runs_are_bitwise_reproducible() {
    let (x, y) = logistic_data(12, 6 * 80, 9);
    let data = shard(&x, &y, 6).unwrap();
    let policy = CrossValidation::default();
    let a = run_algorithm1(&data, LossFamily::Logistic, 2, &policy, &SolverConfig::default()).unwrap();
    let b = run_algorithm1(&data, LossFamily::Logistic, 2, &policy, &SolverConfig::default()).unwrap();
    assert_eq!(a, b);
    let spec = BootstrapSpec::new(BootMethod::NK1Grad, RngKey::new(3, Purpose::Multiplier));
    assert_eq!(dist_boots(&spec, &a).unwrap(), dist_boots(&spec, &b).unwrap());
}

#[test]
fn quantile_grows_with_alpha_and_width_is_exact() {
    let (x, y) = linear_data(21, 6 * 50, 6);
    let data = shard(&x, &y, 6).unwrap();
    let policy = FixedLambdas {
        initial: 0.05,
        nodewise: 0.05,
        rounds: vec![],
    };
    let state = run_algorithm1(&data, LossFamily::Linear, 2, &policy, &SolverConfig::default()).unwrap();
    let key = RngKey::new(4, Purpose::Multiplier);
    for method in BootMethod::ALL {
        let at = |alpha: f64| dist_boots(&BootstrapSpec { alpha, ..BootstrapSpec::new(method, key) }, &state).unwrap();
        let (lo, hi) = (at(0.90), at(0.95));
        assert!(lo.c_alpha <= hi.c_alpha);
        assert_eq!(hi.width(), 2.0 * hi.c_alpha / (300f64).sqrt());
        for l in 0..6 {
            assert_eq!(hi.ci_upper[l], hi.center[l] + hi.c_alpha / (300f64).sqrt());
            assert_eq!(hi.ci_lower[l], hi.center[l] - hi.c_alpha / (300f64).sqrt());
        }
    }
}
