use structadmm::cost::{
    best_use_case, complexity_order, cost_report, count_iteration, measured_row, thread_partition, Mode, TableRow, Threads, UseCase,
};
use structadmm::gen::{gen_cascade, gen_ring_chain, scenario, ScenarioSpec};
use structadmm::problem::{MpcProblem, Partition, PartitionedProblem};
use structadmm::solver::{structured_cache, AdmmConfig, SolverCache};

fn chain(m: usize, horizon: usize) -> (MpcProblem, Partition, Vec<usize>) {
    let (sys, part, w) = gen_ring_chain(m).unwrap();
    (scenario(&sys, &ScenarioSpec { horizon, ..Default::default() }, 2).unwrap(), part, w)
}

#[test]
fn step_counts_add_up() {
    let (p, part, _) = chain(4, 6);
    let pp = PartitionedProblem::new(&p, &part).unwrap();
    let cache = structured_cache(&pp, &AdmmConfig::default()).unwrap();
    let c = count_iteration(&pp, &cache, Mode::Structured).unwrap();
    let by_step: u64 = c.steps.values().map(|s| s.total()).sum();
    assert_eq!(by_step, c.total());
    assert_eq!(c.units.total().total(), c.total());

    let single = thread_partition(&c, &pp, UseCase::Out1, Threads::One).unwrap();
    assert_eq!(single.longest, c.total());
    assert_eq!(single.thread_count, 1);
    let par = thread_partition(&c, &pp, UseCase::Out1, Threads::TwoMN).unwrap();
    assert!(par.longest < single.longest);
    // every phase's units together carry the whole iteration
    let units: u64 = par.phases.iter().flat_map(|ph| ph.unit_costs.iter()).sum();
    assert_eq!(units, c.total());
}

#[test]
fn counts_grow_with_horizon_and_chain_length() {
    for row in TableRow::ALL {
        let mut last = 0;
        for n in [2, 4, 8] {
            let (p, part, _) = chain(3, n);
            let c = measured_row(&p, &part, 0.5, row).unwrap();
            assert!(c > last, "{row:?} at N={n}");
            last = c;
        }
    }
    for row in [TableRow::Conventional, TableRow::BoxSingle, TableRow::Out1Single] {
        let mut last = 0;
        for m in [2, 4, 8] {
            let (p, part, _) = chain(m, 5);
            let c = measured_row(&p, &part, 0.5, row).unwrap();
            assert!(c > last, "{row:?} at M={m}");
            last = c;
        }
    }
}

#[test]
fn single_subsystem_costs_like_conventional() {
    let (p, part, _) = chain(1, 7);
    let pp = PartitionedProblem::new(&p, &part).unwrap();
    let conv = SolverCache::new(&pp, &[1.0], 1.0, false).unwrap();
    let a = count_iteration(&pp, &conv, Mode::Conventional).unwrap();
    let st = structured_cache(&pp, &AdmmConfig { beta: 1.0, ..Default::default() }).unwrap();
    let b = count_iteration(&pp, &st, Mode::Structured).unwrap();
    assert_eq!(a.total(), b.total());
    let r = cost_report(&p, &part, 1.0, None).unwrap();
    assert_eq!(r.conventional, r.structured_single);
}

#[test]
fn cascade_is_out1() {
    let (sys, part) = gen_cascade(5, 3, 1, 1, 3).unwrap();
    let p = scenario(&sys, &ScenarioSpec { horizon: 4, ..Default::default() }, 3).unwrap();
    assert_eq!(best_use_case(&PartitionedProblem::new(&p, &part).unwrap()), UseCase::Out1);
    let r = cost_report(&p, &part, 0.5, None).unwrap();
    assert!(r.structured_parallel < r.structured_single && r.structured_single < r.conventional);
}

#[test]
fn orders_are_monotone_in_size() {
    for row in TableRow::ALL {
        let small = complexity_order(&[2, 2], &[1, 1], 5, row);
        let longer = complexity_order(&[2, 2], &[1, 1], 10, row);
        let wider = complexity_order(&[3, 3], &[1, 1], 5, row);
        assert!(longer > small && wider > small, "{row:?}");
    }
}
