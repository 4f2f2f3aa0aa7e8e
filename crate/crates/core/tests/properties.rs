use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use structadmm::gen::{gen_category, scenario, Category, GenSpec, ScenarioSpec};
use structadmm::ops::NoTally;
use structadmm::problem::{LtiSystem, Partition, PartitionedProblem};
use structadmm::solver::{conventional_step, structured_cache, structured_step, AdmmConfig, AdmmState, SolverCache};
use structadmm::structure::{
    analyze, diagonal_transform, link_usage, link_usage_with_impulse, separation_tendency, transformed_impulse, DEFAULT_DECAY_TOL,
    DEFAULT_MAX_K,
};
use structadmm::tuning::{null_space_basis, optimal_rho};

fn category() -> impl Strategy<Value = Category> {
    prop::sample::select(Category::STUDY.to_vec())
}

fn problem(cat: Category, nx: usize, m: usize, seed: u64) -> (structadmm::problem::MpcProblem, Partition) {
    let (sys, part) = gen_category(&GenSpec::even(cat, nx, m, seed)).unwrap();
    (scenario(&sys, &ScenarioSpec { horizon: 3, ..Default::default() }, seed).unwrap(), part)
}

fn random_system(nx: usize, nu: usize, vals: &[f64]) -> LtiSystem {
    let a = DMatrix::from_fn(nx, nx, |i, j| vals[(i * nx + j) % vals.len()] * 0.3);
    let b = DMatrix::from_fn(nx, nu, |i, j| vals[(7 + i * nu + j) % vals.len()]);
    LtiSystem::new(a, b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_subsystem_iterates_match(seed in 0u64..1000, nx in 2usize..6, log_rho in -1.5f64..1.5) {
        let (p, _) = problem(Category::Full, nx, 1, seed);
        let pp = PartitionedProblem::conventional(&p).unwrap();
        let rho = 10f64.powf(log_rho);
        let conv = SolverCache::new(&pp, &[rho], 1.0, false).unwrap();
        let st = structured_cache(&pp, &AdmmConfig { rho: vec![rho], beta: 1.0, ..Default::default() }).unwrap();
        let mut a = AdmmState::zeros(pp.ydim(), false);
        let mut b = a.clone();
        for _ in 0..20 {
            conventional_step(&pp, &conv, &mut a, &mut NoTally);
            structured_step(&pp, &st, &mut b);
            for (x, y) in a.y.iter().zip(&b.y) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn structured_steps_keep_invariants(cat in category(), seed in 0u64..1000, nx in 4usize..8, m in 2usize..4, beta in 0.05f64..0.95) {
        let (p, part) = problem(cat, nx, m, seed);
        let pp = PartitionedProblem::new(&p, &part).unwrap();
        let cache = structured_cache(&pp, &AdmmConfig { beta, ..Default::default() }).unwrap();
        let mut st = AdmmState::zeros(pp.ydim(), true);
        for _ in 0..15 {
            structured_step(&pp, &cache, &mut st);
            for i in 0..pp.m() {
                prop_assert!(pp.dynamics_residual(i, &st.y[pp.range(i)]) <= 1e-9);
            }
            prop_assert!(pp.in_constraint_set(&st.zeta));
            prop_assert!(pp.coupling_residual(&st.eps) <= 1e-9);
        }
    }

    #[test]
    fn optimal_penalty_scales_with_cost(seed in 0u64..1000, c in 0.01f64..100.0) {
        let (p, _) = problem(Category::Sparse, 4, 1, seed);
        let pp = PartitionedProblem::conventional(&p).unwrap();
        let s = &pp.subsystems[0];
        let z = null_space_basis(&s.c_mat.to_dense()).unwrap().z;
        let h = s.hessian();
        let r1 = optimal_rho(&h, &z).unwrap();
        let r2 = optimal_rho(&(&h * c), &z).unwrap();
        prop_assert!((r2 - c * r1).abs() <= 1e-9 * r2);
    }

    #[test]
    fn generation_is_deterministic(cat in category(), seed in 0u64..10_000) {
        let spec = GenSpec::even(cat, 6, 2, seed);
        let (a, pa) = gen_category(&spec).unwrap();
        let (b, pb) = gen_category(&spec).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(pa, pb);
    }

    #[test]
    fn flow_rows_sum_to_next_difference(vals in prop::collection::vec(-1.0f64..1.0, 16), nx in 1usize..5, nu in 1usize..3) {
        let sys = random_system(nx, nu, &vals);
        let (seq, _) = link_usage(&sys, 40, 0.0);
        for k in 0..seq.truncation_k {
            let phi = seq.flow(k);
            let sums = DVector::from_fn(nx, |i, _| phi.row(i).sum());
            prop_assert!((sums - &seq.delta_x[k + 1]).amax() <= 1e-12 * seq.delta_x[k + 1].amax().max(1.0));
        }
    }

    #[test]
    fn separation_tendency_is_a_fraction(cat in category(), seed in 0u64..1000, nx in 3usize..9, m in 1usize..4) {
        let (sys, part) = gen_category(&GenSpec::even(cat, nx, m.min(nx), seed)).unwrap();
        let rep = analyze(&sys, &part).unwrap();
        if let Some(rows) = rep.s_rows {
            prop_assert!(rows.iter().all(|v| (0.0..=1.0).contains(v)));
            let s = rep.s.unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn separation_tendency_ignores_diagonal_scaling(
        cat in category(),
        seed in 0u64..1000,
        scale in prop::collection::vec((0.1f64..10.0, any::<bool>()), 8),
    ) {
        let (sys, part) = gen_category(&GenSpec::even(cat, 6, 2, seed)).unwrap();
        let s = analyze(&sys, &part).unwrap().s.unwrap();
        let d = DVector::from_iterator(8, scale.iter().map(|&(v, neg)| if neg { -v } else { v }));
        let t = diagonal_transform(&sys, &d).unwrap();
        let (_, g) = link_usage_with_impulse(&t, &transformed_impulse(&d, 6), DEFAULT_MAX_K, DEFAULT_DECAY_TOL);
        prop_assert!((separation_tendency(&g, &part).unwrap().s - s).abs() <= 1e-10);
    }
}
