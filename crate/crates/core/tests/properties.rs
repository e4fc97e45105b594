use cfl_replay::qp::{project_capped_simplex, solve, QpProblem, SolverOptions};
use cfl_replay::selection::{
    gram, normalize_columns, numbered_ids, objective_discrete_indices, objective_relaxed, GradientSet,
    SelectionWeights,
};
use cfl_replay::strategies::{select, BufferUpdateInput, StrategySpec};
use cfl_replay::synthetic::brute_force_optimum;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use proptest::prelude::*;

/// Raw (d x n) gradient matrix with entries in [-1, 1].
fn raw_matrix(max_d: usize, min_n: usize, max_n: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_d, min_n..=max_n).prop_flat_map(|(d, n)| {
        proptest::collection::vec(-1.0f64..1.0, d * n)
            .prop_map(move |v| Array2::from_shape_vec((d, n), v).unwrap())
    })
}

fn unit(raw: &Array2<f64>) -> Option<GradientSet> {
    // all-zero draws are rejected by normalization; proptest just skips them
    normalize_columns(raw.view(), numbered_ids("s", raw.ncols())).ok()
}

fn subset_of(n: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::sample::subsequence((0..n).collect::<Vec<_>>(), 1..=n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn relaxed_matches_discrete_on_indicators((raw, pick) in raw_matrix(6, 1, 12).prop_flat_map(|m| {
        let n = m.ncols();
        (Just(m), subset_of(n))
    })) {
        let g = unit(&raw);
        prop_assume!(g.is_some());
        let g = g.unwrap();
        let pick: Vec<usize> = pick.into_iter().filter(|&i| i < g.count()).collect();
        prop_assume!(!pick.is_empty());
        let x = SelectionWeights::indicator(g.count(), &pick).unwrap();
        let relaxed = objective_relaxed(&gram(&g, false), &x).unwrap();
        let discrete = objective_discrete_indices(&g, &pick, true);
        prop_assert!((relaxed - discrete).abs() <= 1e-6, "{relaxed} vs {discrete}");
        let without = objective_discrete_indices(&g, &pick, false);
        prop_assert!((discrete - without - pick.len() as f64).abs() <= 1e-6);
    }

    #[test]
    fn gram_is_symmetric_bounded_and_psd(raw in raw_matrix(8, 1, 12)) {
        let g = unit(&raw);
        prop_assume!(g.is_some());
        let g = g.unwrap();
        let q = gram(&g, false);
        let n = q.size();
        for i in 0..n {
            prop_assert!((q.get(i, i) - 1.0).abs() <= 1e-9);
            for j in 0..n {
                prop_assert!((q.get(i, j) - q.get(j, i)).abs() <= 1e-9);
                prop_assert!(q.get(i, j).abs() <= 1.0 + 1e-9);
            }
        }
        let m = DMatrix::from_fn(n, n, |i, j| q.get(i, j));
        let eig = SymmetricEigen::new(m);
        prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-8), "{:?}", eig.eigenvalues);
        let zeroed = gram(&g, true);
        prop_assert!((0..n).all(|i| zeroed.get(i, i) == 0.0));
    }

    #[test]
    fn projection_is_feasible_idempotent_and_nonexpansive(
        (y, z, budget) in (2usize..20).prop_flat_map(|n| (
            proptest::collection::vec(-3.0f64..3.0, n),
            proptest::collection::vec(-3.0f64..3.0, n),
            1..=n,
        ))
    ) {
        let p = project_capped_simplex(&y, budget).unwrap();
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - budget as f64).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&v| (-1e-7..=1.0 + 1e-7).contains(&v)));
        let again = project_capped_simplex(&p, budget).unwrap();
        let drift: f64 = p.iter().zip(&again).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(drift <= 1e-9, "not idempotent: {drift}");
        let q = project_capped_simplex(&z, budget).unwrap();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        prop_assert!(dist(&p, &q) <= dist(&y, &z) + 1e-9);
    }

    #[test]
    fn solver_output_is_feasible_and_consistent((raw, budget) in raw_matrix(6, 2, 10).prop_flat_map(|m| {
        let n = m.ncols();
        (Just(m), 1..n)
    }), zero_diagonal in any::<bool>()) {
        let g = unit(&raw);
        prop_assume!(g.as_ref().is_some_and(|g| g.count() > budget));
        let g = g.unwrap();
        let q = gram(&g, zero_diagonal);
        let problem = QpProblem::quadratic(&q, budget);
        let sol = solve(&problem, &SolverOptions::default()).unwrap();
        let x = sol.x.values();
        prop_assert!(x.iter().all(|&v| (-1e-7..=1.0 + 1e-7).contains(&v)));
        prop_assert!((x.iter().sum::<f64>() - budget as f64).abs() <= 1e-6);
        prop_assert!((sol.objective - problem.objective(x)).abs() <= 1e-6);
        // never worse than where it starts
        let uniform = vec![budget as f64 / g.count() as f64; g.count()];
        prop_assert!(sol.objective <= problem.objective(&uniform) + 1e-9);
    }

    #[test]
    fn strategies_return_distinct_pool_ids_deterministically(
        raw in raw_matrix(5, 1, 15),
        budget in 1usize..8,
        kind in proptest::sample::select(vec![
            "naive_uniform", "approx_uniform", "fixed_proportion@0.3", "greedy_gss", "relaxed_convex", "relaxed_nonconvex",
        ]),
        seed in any::<u64>(),
    ) {
        let g = unit(&raw);
        prop_assume!(g.is_some());
        let g = g.unwrap();
        let mut spec: StrategySpec = kind.parse().unwrap();
        spec.seed = seed;
        let input = BufferUpdateInput::from_gradients(&g, budget);
        let a = select(&spec, &input, &SolverOptions::default()).unwrap();
        let b = select(&spec, &input, &SolverOptions::default()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), budget.min(g.count()));
        let mut ids = a.chosen.clone();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), a.len());
        prop_assert!(a.chosen.iter().all(|id| g.ids().contains(id)));
    }

    #[test]
    fn gradient_strategies_ignore_positive_rescaling(
        raw in raw_matrix(5, 2, 12),
        budget in 1usize..6,
        kind in proptest::sample::select(vec!["greedy_gss", "relaxed_convex", "relaxed_nonconvex"]),
    ) {
        let g = unit(&raw);
        prop_assume!(g.is_some());
        let scaled = unit(&(&raw * 7.3)).unwrap();
        let spec: StrategySpec = kind.parse().unwrap();
        let solver = SolverOptions::default();
        let a = select(&spec, &BufferUpdateInput::from_gradients(&g.unwrap(), budget), &solver).unwrap();
        let b = select(&spec, &BufferUpdateInput::from_gradients(&scaled, budget), &solver).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn brute_force_value_is_permutation_invariant(
        (raw, budget, perm) in raw_matrix(5, 2, 8).prop_flat_map(|m| {
            let n = m.ncols();
            (Just(m), 1..n, Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        })
    ) {
        let g = unit(&raw);
        prop_assume!(g.as_ref().is_some_and(|g| g.count() == raw.ncols()));
        let g = g.unwrap();
        let shuffled = raw.select(ndarray::Axis(1), &perm);
        let h = normalize_columns(shuffled.view(), perm.iter().map(|&i| g.ids()[i].clone()).collect()).unwrap();
        let a = brute_force_optimum(&g, budget, true).unwrap();
        let b = brute_force_optimum(&h, budget, true).unwrap();
        prop_assert!((a.objective - b.objective).abs() <= 1e-9);
        // the optimum maps to a set with the same objective
        let mapped: Vec<usize> = b.indices.iter().map(|&i| perm[i]).collect();
        prop_assert!((objective_discrete_indices(&g, &mapped, true) - a.objective).abs() <= 1e-9);
    }
}
