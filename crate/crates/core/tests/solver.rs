use nalgebra::{DMatrix, DVector};
use structadmm::problem::{ConstraintSet, LtiSystem, MpcProblem, Partition, PartitionedProblem, Trajectory};
use structadmm::solver::{
    dist, kkt_residual, project_box, solve_conventional, solve_structured, structured_cache, structured_step, AdmmConfig,
    AdmmState, Status, Warning,
};
use structadmm::Error;

fn example_problem(n: usize, bounded: bool) -> MpcProblem {
    let sys = LtiSystem::new(DMatrix::from_element(2, 2, 0.5), DMatrix::from_element(2, 1, 1.0)).unwrap();
    let (xset, uset) = if bounded {
        (
            ConstraintSet::symmetric_box(&DVector::from_element(2, 1.0)),
            ConstraintSet::symmetric_box(&DVector::from_element(1, 0.6)),
        )
    } else {
        (ConstraintSet::Unbounded, ConstraintSet::Unbounded)
    };
    MpcProblem::new(
        sys,
        n,
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1) * 0.1,
        (0..n).map(|k| DVector::from_vec(vec![1.5, -0.5 + 0.1 * k as f64])).collect(),
        (0..n).map(|_| DVector::from_element(1, 0.2)).collect(),
        DVector::from_vec(vec![0.3, -0.2]),
        xset,
        uset,
    )
    .unwrap()
}

fn example_partition() -> Partition {
    Partition::new(vec![1, 1], vec![1, 0]).unwrap()
}

/// Dense KKT solve of the equality-constrained stacked QP.
fn dense_kkt_solution(problem: &MpcProblem) -> Trajectory {
    let pp = PartitionedProblem::conventional(problem).unwrap();
    let s = &pp.subsystems[0];
    let h = s.hessian();
    let c = s.c_mat.to_dense();
    let (n, m) = (h.nrows(), c.nrows());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&h);
    k.view_mut((0, n), (n, m)).copy_from(&c.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(&c);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-&s.q));
    rhs.rows_mut(n, m).copy_from(&s.c);
    let sol = k.lu().solve(&rhs).unwrap();
    pp.extract(sol.rows(0, n).as_slice())
}

#[test]
fn scalar_lq_matches_closed_form() {
    let (a, b, x1, q, r, rx, ru) = (0.9, 0.5, 1.0, 2.0, 0.3, 2.0, -0.4);
    let sys = LtiSystem::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b)).unwrap();
    let p = MpcProblem::new(
        sys,
        1,
        DMatrix::from_element(1, 1, q),
        DMatrix::from_element(1, 1, r),
        vec![DVector::from_element(1, rx)],
        vec![DVector::from_element(1, ru)],
        DVector::from_element(1, x1),
        ConstraintSet::Unbounded,
        ConstraintSet::Unbounded,
    )
    .unwrap();
    let u = (r * ru + q * b * (rx - a * x1)) / (r + q * b * b);
    let pp = PartitionedProblem::conventional(&p).unwrap();
    let cfg = AdmmConfig { beta: 1.0, tol_primal: 1e-12, tol_dual: 1e-12, ..Default::default() };
    let sol = solve_conventional(&pp, &cfg, None).unwrap();
    assert_eq!(sol.status, Status::Converged);
    assert!((sol.trajectory.inputs[0][0] - u).abs() < 1e-8);
    assert!((sol.trajectory.states[0][0] - (a * x1 + b * u)).abs() < 1e-8);
}

#[test]
fn unconstrained_solution_matches_dense_kkt() {
    let p = example_problem(4, false);
    let exact = dense_kkt_solution(&p);
    let cfg = AdmmConfig { beta: 1.0, tol_primal: 1e-11, tol_dual: 1e-11, max_iters: 50_000, ..Default::default() };
    let conv = solve_conventional(&PartitionedProblem::conventional(&p).unwrap(), &cfg, None).unwrap();
    assert!(dist(&conv.trajectory, &exact).unwrap() < 1e-16);
    let cfg = AdmmConfig { beta: 0.5, ..cfg };
    let st = solve_structured(&PartitionedProblem::new(&p, &example_partition()).unwrap(), &cfg, None).unwrap();
    assert!(dist(&st.trajectory, &exact).unwrap() < 1e-16);
}

#[test]
fn both_algorithms_agree_on_box_constrained_example() {
    let p = example_problem(5, true);
    let cfg = AdmmConfig { beta: 1.0, tol_primal: 1e-10, tol_dual: 1e-10, max_iters: 100_000, ..Default::default() };
    let conv = solve_conventional(&PartitionedProblem::conventional(&p).unwrap(), &cfg, None).unwrap();
    assert_eq!(conv.status, Status::Converged);
    assert!(kkt_residual(&p, &conv.trajectory).unwrap().max() < 1e-7);

    let pp = PartitionedProblem::new(&p, &example_partition()).unwrap();
    let cfg = AdmmConfig {
        beta: 0.5,
        reference: Some(conv.trajectory.clone()),
        dist_target: Some(1e-8),
        check_invariants: true,
        max_iters: 100_000,
        ..Default::default()
    };
    let st = solve_structured(&pp, &cfg, None).unwrap();
    assert_eq!(st.status, Status::TargetReached);
    let inv = st.worst_invariants.unwrap();
    assert!(inv.dynamics <= 1e-9 && inv.coupling <= 1e-9 && inv.zeta_in_set);
}

#[test]
fn structured_reduces_to_conventional_for_single_subsystem() {
    let p = example_problem(3, true);
    let pp = PartitionedProblem::conventional(&p).unwrap();
    let cfg = AdmmConfig { rho: vec![0.7], beta: 1.0, max_iters: 60, tol_primal: 0.0, tol_dual: 0.0, ..Default::default() };
    let a = solve_conventional(&pp, &cfg, None).unwrap();
    let b = solve_structured(&pp, &cfg, None).unwrap();
    assert_eq!(a.iterations, 60);
    assert_eq!(a.state, b.state);
    assert_eq!(a.ops_per_iteration, b.ops_per_iteration);
    assert!(a.warnings.is_empty());
}

#[test]
fn beta_one_rejected_for_several_subsystems() {
    let p = example_problem(2, true);
    let pp = PartitionedProblem::new(&p, &example_partition()).unwrap();
    let cfg = AdmmConfig { beta: 1.0, ..Default::default() };
    assert!(matches!(solve_structured(&pp, &cfg, None), Err(Error::InvalidBeta(2))));
}

#[test]
fn conventional_warns_about_beta() {
    let p = example_problem(2, true);
    let pp = PartitionedProblem::conventional(&p).unwrap();
    let sol = solve_conventional(&pp, &AdmmConfig { max_iters: 3, ..Default::default() }, None).unwrap();
    assert_eq!(sol.warnings, vec![Warning::BetaIgnored]);
    assert_eq!(sol.status, Status::NonConvergence);
}

#[test]
fn origin_is_a_fixed_point() {
    let mut p = example_problem(3, true);
    p.x1 = DVector::zeros(2);
    p.r_x.iter_mut().for_each(|v| v.fill(0.0));
    p.r_u.iter_mut().for_each(|v| v.fill(0.0));
    let pp = PartitionedProblem::new(&p, &example_partition()).unwrap();
    let sol = solve_structured(&pp, &AdmmConfig::default(), None).unwrap();
    assert_eq!(sol.iterations, 1);
    assert_eq!(sol.status, Status::Converged);
    assert_eq!(sol.state, AdmmState { iter: 1, ..AdmmState::zeros(pp.ydim(), true) });
}

#[test]
fn parallel_iterates_are_bitwise_identical() {
    let p = example_problem(6, true);
    let pp = PartitionedProblem::new(&p, &example_partition()).unwrap();
    let cfg = AdmmConfig { max_iters: 40, tol_primal: 0.0, tol_dual: 0.0, ..Default::default() };
    let a = solve_structured(&pp, &cfg, None).unwrap();
    let b = solve_structured(&pp, &AdmmConfig { parallel: true, ..cfg }, None).unwrap();
    assert_eq!(a.state, b.state);
}

#[test]
fn coupling_projection_matches_dense_affine_projection() {
    let p = example_problem(2, false);
    let pp = PartitionedProblem::new(&p, &example_partition()).unwrap();
    let cache = structured_cache(&pp, &AdmmConfig::default()).unwrap();
    let (d, rhs) = pp.coupling_matrix();
    let z = DVector::from_fn(pp.ydim(), |i, _| (i as f64 * 0.37).sin());
    let ddt = &d * d.transpose();
    let oracle = &z - d.transpose() * ddt.lu().solve(&(&d * &z - &rhs)).unwrap();
    let eps = cache.coupling_projection(z.as_slice());
    assert!((DVector::from_vec(eps.clone()) - &oracle).amax() < 1e-12);
    assert!(pp.coupling_residual(&eps) < 1e-12);
    // feasible points are left alone
    let again = cache.coupling_projection(&eps);
    assert!(again.iter().zip(&eps).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn coupling_projection_is_identity_without_coupling() {
    let p = example_problem(2, false);
    let pp = PartitionedProblem::conventional(&p).unwrap();
    let cache = structured_cache(&pp, &AdmmConfig { beta: 0.5, ..Default::default() }).unwrap();
    let z: Vec<f64> = (0..pp.ydim()).map(|i| i as f64 - 2.0).collect();
    assert_eq!(cache.coupling_projection(&z), z);
}

#[test]
fn step_keeps_dynamics_exact() {
    let p = example_problem(4, true);
    let pp = PartitionedProblem::new(&p, &example_partition()).unwrap();
    let cache = structured_cache(&pp, &AdmmConfig { rho: vec![0.3, 5.0], ..Default::default() }).unwrap();
    let mut st = AdmmState::zeros(pp.ydim(), true);
    for _ in 0..25 {
        structured_step(&pp, &cache, &mut st);
        for i in 0..pp.m() {
            assert!(pp.dynamics_residual(i, &st.y[pp.range(i)]) < 1e-12);
        }
        assert!(pp.coupling_residual(&st.eps) < 1e-12);
        assert!(pp.in_constraint_set(&st.zeta));
    }
}

#[test]
fn dist_examples() {
    let p = example_problem(3, false);
    let t = dense_kkt_solution(&p);
    assert_eq!(dist(&t, &t).unwrap(), 0.0);
    assert!((dist(&t.scaled(2.0), &t).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(dist(&t.scaled(0.0), &t).unwrap(), 1.0);
    assert!(matches!(dist(&t, &t.scaled(0.0)), Err(Error::ZeroReference)));
}

#[test]
fn box_projection_examples() {
    let b = ConstraintSet::symmetric_box(&DVector::from_element(2, 1.0));
    assert_eq!(project_box(&[5.0, -5.0], &b), vec![1.0, -1.0]);
    assert_eq!(project_box(&[0.5, 0.1], &b), vec![0.5, 0.1]);
    assert_eq!(project_box(&[5.0, -5.0], &ConstraintSet::Unbounded), vec![5.0, -5.0]);
}
