//! Property and oracle tests for the entropic transport solver.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remote_core::ot::{cosine_cost, exact_ot_oracle, sinkhorn, OtProblem};
use remote_core::tensor::Tensor;

fn random_cost(rng: &mut ChaCha8Rng, a: usize, b: usize) -> Tensor<f64> {
    let data = (0..a * b).map(|_| rng.random_range(0.0..2.0)).collect();
    Tensor::new(vec![a, b], data).unwrap()
}

/// Independent assignment enumerator, structured differently from the
/// production oracle (recursive branch-and-take instead of Heap's swaps).
fn brute_force_assignment(cost: &Tensor<f64>) -> f64 {
    fn recurse(cost: &Tensor<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let n = cost.shape()[0];
        if row == n {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for col in 0..n {
            if !used[col] {
                used[col] = true;
                recurse(cost, row + 1, used, acc + cost.at(row, col), best);
                used[col] = false;
            }
        }
    }
    let n = cost.shape()[0];
    let mut best = f64::INFINITY;
    recurse(cost, 0, &mut vec![false; n], 0.0, &mut best);
    best / n as f64
}

#[test]
fn production_oracle_matches_independent_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let c = random_cost(&mut rng, 4, 4);
        let (_, prod) = exact_ot_oracle(&c).unwrap();
        let test_side = brute_force_assignment(&c);
        assert!((prod - test_side).abs() < 1e-12);
    }
}

#[test]
fn feasibility_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for round in 0..30 {
        let a = rng.random_range(1..=10usize);
        let b = rng.random_range(1..=20usize);
        let lambda = [0.05, 0.1, 0.5][round % 3];
        let problem = OtProblem::uniform(random_cost(&mut rng, a, b), lambda).unwrap();
        let plan = sinkhorn(&problem, 50_000, 1e-8).unwrap();
        assert!(plan.converged, "no convergence at lambda {lambda} {a}x{b}");
        assert!(
            plan.marginal_residual < 1e-8,
            "residual {} at lambda {lambda}",
            plan.marginal_residual
        );
        assert!(plan.plan.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn entropy_monotone_in_lambda() {
    let lambdas = [0.01, 0.05, 0.1, 0.5, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let a = rng.random_range(2..=6usize);
        let b = rng.random_range(2..=6usize);
        let cost = random_cost(&mut rng, a, b);
        let mut prev = f64::NEG_INFINITY;
        for &lambda in &lambdas {
            let problem = OtProblem::uniform(cost.clone(), lambda).unwrap();
            let plan = sinkhorn(&problem, 100_000, 1e-7).unwrap();
            assert!(
                plan.marginal_residual < 1e-6,
                "lambda {lambda} residual {}",
                plan.marginal_residual
            );
            assert!(
                plan.entropy >= prev - 1e-9,
                "entropy decreased from {prev} to {} at lambda {lambda}",
                plan.entropy
            );
            prev = plan.entropy;
        }
    }
}

#[test]
fn small_lambda_cost_approaches_assignment_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..12 {
        let n = rng.random_range(3..=6usize);
        let cost = random_cost(&mut rng, n, n);
        let (_, opt) = exact_ot_oracle(&cost).unwrap();
        let problem = OtProblem::uniform(cost, 1e-3).unwrap();
        let plan = sinkhorn(&problem, 200_000, 1e-9).unwrap();
        let gap = plan.transport_cost - opt;
        assert!(gap >= -1e-9, "sinkhorn beat the LP optimum: gap {gap}");
        assert!(
            gap <= 0.01 * opt + 1e-4,
            "gap {gap} exceeds 1% of optimum {opt}"
        );
    }
}

#[test]
fn transported_rows_stay_in_source_convex_hull() {
    // non-negative plan entries with unit row mass after the a-rescale mean
    // every output row is a convex combination of source rows
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..10 {
        let a = rng.random_range(2..=5usize);
        let b = rng.random_range(2..=8usize);
        let problem = OtProblem::uniform(random_cost(&mut rng, a, b), 0.1).unwrap();
        let plan = sinkhorn(&problem, 10_000, 1e-10).unwrap();
        for i in 0..a {
            let mass: f64 = plan.plan.row(i).iter().sum();
            assert!(plan.plan.row(i).iter().all(|&v| v >= 0.0));
            assert!(((mass * a as f64) - 1.0).abs() < 1e-7, "row mass {mass}");
        }
    }
}

#[test]
fn cosine_cost_orientation_matches_plan() {
    // target rows index the plan's rows: C is a x b for mu in R^{b x d}
    let mu = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let nu = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
    let (c, _) = cosine_cost(&mu, &nu).unwrap();
    assert_eq!(c.shape(), &[2, 3]);
    assert!(c.at(0, 0).abs() < 1e-12, "nu_0 aligned with mu_0");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_sinkhorn_feasible_and_nonnegative(
        a in 1usize..6,
        b in 1usize..8,
        lambda in prop::sample::select(vec![0.02, 0.05, 0.1, 0.3, 1.0]),
        seed in 0u64..1_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = random_cost(&mut rng, a, b);
        let problem = OtProblem::uniform(cost, lambda).unwrap();
        let plan = sinkhorn(&problem, 50_000, 1e-8).unwrap();
        prop_assert!(plan.converged);
        prop_assert!(plan.marginal_residual < 1e-8);
        prop_assert!(plan.plan.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        let total: f64 = plan.plan.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-7);
    }

    #[test]
    fn prop_cosine_cost_in_range(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in 0u64..1_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = Tensor::new(vec![rows, 3], (0..rows * 3).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let nu = Tensor::new(vec![cols, 3], (0..cols * 3).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let (c, _) = cosine_cost(&mu, &nu).unwrap();
        prop_assert!(c.data().iter().all(|&v| (0.0..=2.0).contains(&v)));
    }
}
