//! Per-iteration operation counts, thread schedules and the symbolic
//! complexity orders used for growth curves.
//!
//! Counts come from running the solver kernels once with an [`OpCount`]
//! tally; see [`crate::ops`] for the counting conventions. The parallel
//! schedule is abstract: within a step every work unit gets its own thread,
//! steps are separated by barriers and the set projection runs concurrently
//! with the coupling projection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::OpCount;
use crate::problem::{ConstraintSet, MpcProblem, Partition, PartitionedProblem};
use crate::solver::{check_beta, count_conventional_iteration, AdmmState, IterationCounts, SolverCache};

/// Counting conventions, written into every cost output header.
pub const CONVENTIONS: &str =
    "comparison=add;division=mul;unit_coefficient=free;memory_moves=free;precomputed_constants=free;factorizations=precomputed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Conventional,
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UseCase {
    General,
    Box,
    Out1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Threads {
    One,
    TwoMN,
}

impl Threads {
    pub fn count(&self, m: usize, n: usize) -> usize {
        match self {
            Threads::One => 1,
            Threads::TwoMN => 2 * m * n,
        }
    }
}

/// Operation counts of one iteration.
#[derive(Debug, Clone, Serialize)]
pub struct OpCounter {
    pub mode: Mode,
    pub adds: u64,
    pub muls: u64,
    /// Totals keyed by step id ("1.1"–"1.3" or "2.1"–"2.4").
    pub steps: BTreeMap<String, OpCount>,
    pub units: IterationCounts,
}

impl OpCounter {
    pub fn total(&self) -> u64 {
        self.adds + self.muls
    }
}

fn sum(v: &[OpCount]) -> OpCount {
    v.iter().copied().sum()
}

/// Instruments one full iteration from the zero state. The counts depend on
/// the sparsity of the data only, not on the iterate.
pub fn count_iteration(pp: &PartitionedProblem, cache: &SolverCache, mode: Mode) -> Result<OpCounter> {
    let mut steps = BTreeMap::new();
    let units = match mode {
        Mode::Conventional => {
            if pp.m() != 1 || cache.eps_active() {
                return Err(Error::InvalidConfig("conventional counts need the trivial partition without ε".into()));
            }
            let u = count_conventional_iteration(pp, cache, &AdmmState::zeros(pp.ydim(), false));
            steps.insert("1.1".to_string(), sum(&u.qp));
            steps.insert("1.2".to_string(), sum(&u.projection));
            steps.insert("1.3".to_string(), sum(&u.dual));
            u
        }
        Mode::Structured => {
            let u = cache.count_iteration(pp, &AdmmState::zeros(pp.ydim(), cache.eps_active()));
            steps.insert("2.1".to_string(), sum(&u.qp));
            steps.insert("2.2".to_string(), sum(&u.projection));
            steps.insert("2.3".to_string(), sum(&u.coupling));
            steps.insert("2.4".to_string(), sum(&u.dual));
            u
        }
    };
    let total: OpCount = steps.values().copied().sum();
    Ok(OpCounter { mode, adds: total.adds, muls: total.muls, steps, units })
}

/// Costs of the work units executed between two barriers.
#[derive(Debug, Clone, Serialize)]
pub struct Phase {
    pub steps: String,
    pub unit_costs: Vec<u64>,
}

impl Phase {
    fn max(&self) -> u64 {
        self.unit_costs.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ThreadPlan {
    pub use_case: UseCase,
    pub threads: Threads,
    pub thread_count: usize,
    pub phases: Vec<Phase>,
    /// Cost along the critical path; the total for a single thread.
    pub longest: u64,
}

fn box_like(set: &ConstraintSet) -> bool {
    matches!(set, ConstraintSet::Unbounded | ConstraintSet::Box { .. })
}

/// Whether `use_case` applies to `pp`.
pub fn check_use_case(pp: &PartitionedProblem, use_case: UseCase) -> Result<()> {
    let all_box = pp.subsystems.iter().all(|s| box_like(&s.xset) && box_like(&s.uset));
    if matches!(use_case, UseCase::Box | UseCase::Out1) && !all_box {
        return Err(Error::InvalidUseCase("constraint sets are not boxes".into()));
    }
    if use_case == UseCase::Out1 && !pp.out1() {
        return Err(Error::InvalidUseCase("partition is not out-1".into()));
    }
    Ok(())
}

/// The most specific use case that applies to `pp`.
pub fn best_use_case(pp: &PartitionedProblem) -> UseCase {
    [UseCase::Out1, UseCase::Box].into_iter().find(|&u| check_use_case(pp, u).is_ok()).unwrap_or(UseCase::General)
}

/// Assigns the counted work units to threads.
pub fn thread_partition(counter: &OpCounter, pp: &PartitionedProblem, use_case: UseCase, threads: Threads) -> Result<ThreadPlan> {
    check_use_case(pp, use_case)?;
    let u = &counter.units;
    if use_case == UseCase::Out1 && !u.coupling.is_empty() && !u.coupling_per_subsystem {
        return Err(Error::InvalidUseCase("coupling projection was counted per time block".into()));
    }
    let tot = |v: &[OpCount]| v.iter().map(|c| c.total()).collect::<Vec<u64>>();

    let projection = match use_case {
        // X_i and U_i of one (subsystem, stage) are clipped by the same thread
        UseCase::Box | UseCase::Out1 => u.projection.chunks(2).map(|c| sum(c).total()).collect(),
        UseCase::General => tot(&u.projection),
    };
    let coupling = match use_case {
        UseCase::Out1 => tot(&u.coupling),
        _ => {
            let mut blocks: BTreeMap<usize, u64> = BTreeMap::new();
            for (c, &b) in u.coupling.iter().zip(&u.coupling_blocks) {
                *blocks.entry(b).or_default() += c.total();
            }
            blocks.into_values().collect()
        }
    };
    let qp = tot(&u.qp);
    let dual = tot(&u.dual);

    let (phases, longest) = match (counter.mode, threads) {
        (Mode::Conventional, _) | (_, Threads::One) => {
            let all: Vec<u64> = vec![counter.total()];
            (vec![Phase { steps: "all".into(), unit_costs: all }], counter.total())
        }
        (Mode::Structured, Threads::TwoMN) => {
            let phases = vec![
                Phase { steps: "2.1".into(), unit_costs: qp },
                Phase { steps: "2.2".into(), unit_costs: projection },
                Phase { steps: "2.3".into(), unit_costs: coupling },
                Phase { steps: "2.4".into(), unit_costs: dual },
            ];
            let longest = phases[0].max() + phases[1].max().max(phases[2].max()) + phases[3].max();
            (phases, longest)
        }
    };
    let thread_count = match counter.mode {
        Mode::Conventional => 1,
        Mode::Structured => threads.count(pp.m(), pp.horizon),
    };
    Ok(ThreadPlan { use_case, threads, thread_count, phases, longest })
}

/// Cost per iteration of (i) conventional ADMM on one thread, (ii) the
/// structured algorithm on one thread and (iii) on `2MN` threads.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub use_case: UseCase,
    pub conventional: u64,
    pub structured_single: u64,
    pub structured_parallel: u64,
    pub ratio_single: f64,
    pub ratio_parallel: f64,
    pub conventional_steps: BTreeMap<String, OpCount>,
    pub structured_steps: BTreeMap<String, OpCount>,
}

/// Counts do not depend on the penalty values, so unit penalties are used.
pub fn cost_report(problem: &MpcProblem, partition: &Partition, beta: f64, use_case: Option<UseCase>) -> Result<CostReport> {
    let conv_pp = PartitionedProblem::conventional(problem)?;
    let conv_cache = SolverCache::new(&conv_pp, &[1.0], 1.0, false)?;
    let conv = count_iteration(&conv_pp, &conv_cache, Mode::Conventional)?;

    let pp = PartitionedProblem::new(problem, partition)?;
    let use_case = use_case.unwrap_or_else(|| best_use_case(&pp));
    check_use_case(&pp, use_case)?;
    let eps = check_beta(pp.m(), beta)?;
    let cache = SolverCache::with_coupling_units(&pp, &vec![1.0; pp.m()], beta, eps, use_case == UseCase::Out1)?;
    let st = count_iteration(&pp, &cache, Mode::Structured)?;
    let single = thread_partition(&st, &pp, use_case, Threads::One)?.longest;
    let parallel = thread_partition(&st, &pp, use_case, Threads::TwoMN)?.longest;
    let base = conv.total() as f64;
    Ok(CostReport {
        use_case,
        conventional: conv.total(),
        structured_single: single,
        structured_parallel: parallel,
        ratio_single: single as f64 / base,
        ratio_parallel: parallel as f64 / base,
        conventional_steps: conv.steps,
        structured_steps: st.steps,
    })
}

/// Rows of the per-iteration complexity table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableRow {
    /// `M = 1`, box, one thread.
    Conventional = 1,
    /// Box, one thread.
    BoxSingle = 2,
    /// Box, `2MN` threads.
    BoxParallel = 3,
    /// Box and out-1, one thread.
    Out1Single = 4,
    /// Box and out-1, `2MN` threads.
    Out1Parallel = 5,
}

impl TableRow {
    pub const ALL: [TableRow; 5] =
        [TableRow::Conventional, TableRow::BoxSingle, TableRow::BoxParallel, TableRow::Out1Single, TableRow::Out1Parallel];

    pub fn use_case(&self) -> UseCase {
        match self {
            TableRow::Conventional | TableRow::BoxSingle | TableRow::BoxParallel => UseCase::Box,
            TableRow::Out1Single | TableRow::Out1Parallel => UseCase::Out1,
        }
    }

    pub fn threads(&self) -> Threads {
        match self {
            TableRow::BoxParallel | TableRow::Out1Parallel => Threads::TwoMN,
            _ => Threads::One,
        }
    }
}

/// Evaluates a complexity order with unit constants. `xdims` and `wdims`
/// hold the per-subsystem state and virtual-input sizes.
pub fn complexity_order(xdims: &[usize], wdims: &[usize], horizon: usize, row: TableRow) -> f64 {
    let m = xdims.len() as f64;
    let n = horizon as f64;
    let x: f64 = xdims.iter().sum::<usize>() as f64;
    let w: f64 = wdims.iter().sum::<usize>() as f64;
    let xmax = xdims.iter().copied().max().unwrap_or(0) as f64;
    let wmax = wdims.iter().copied().max().unwrap_or(0) as f64;
    match row {
        TableRow::Conventional => n * x * x + n * x,
        TableRow::BoxSingle => n * (m * xmax * xmax + m * xmax + w * w),
        TableRow::BoxParallel => n * xmax * xmax + xmax.max(w * w),
        TableRow::Out1Single => m * n * (xmax * xmax + xmax + wmax * wmax),
        TableRow::Out1Parallel => n * xmax * xmax + xmax.max(wmax * wmax),
    }
}

/// All five rows.
pub fn complexity_table(xdims: &[usize], wdims: &[usize], horizon: usize) -> Vec<(TableRow, f64)> {
    TableRow::ALL.iter().map(|&r| (r, complexity_order(xdims, wdims, horizon, r))).collect()
}

/// Measured cost per iteration of the configuration a table row describes:
/// conventional ADMM for the first row, otherwise the structured algorithm
/// with the row's coupling split and thread model.
pub fn measured_row(problem: &MpcProblem, partition: &Partition, beta: f64, row: TableRow) -> Result<u64> {
    if row == TableRow::Conventional {
        let pp = PartitionedProblem::conventional(problem)?;
        let cache = SolverCache::new(&pp, &[1.0], 1.0, false)?;
        return Ok(count_iteration(&pp, &cache, Mode::Conventional)?.total());
    }
    let pp = PartitionedProblem::new(problem, partition)?;
    let use_case = row.use_case();
    check_use_case(&pp, use_case)?;
    let eps = check_beta(pp.m(), beta)?;
    let cache = SolverCache::with_coupling_units(&pp, &vec![1.0; pp.m()], beta, eps, use_case == UseCase::Out1)?;
    let c = count_iteration(&pp, &cache, Mode::Structured)?;
    Ok(thread_partition(&c, &pp, use_case, row.threads())?.longest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        assert_eq!(complexity_order(&[2], &[], 10, TableRow::Conventional), 60.0);
        assert_eq!(complexity_order(&[2, 2], &[1, 1], 10, TableRow::Out1Parallel), 42.0);
        // single virtual input: total and largest coincide
        let a = complexity_order(&[2, 3], &[0, 2], 7, TableRow::BoxParallel);
        let b = complexity_order(&[2, 3], &[0, 2], 7, TableRow::Out1Parallel);
        assert_eq!(a, b);
    }

    #[test]
    fn orders_for_large_chains() {
        let m = 15;
        let x = vec![2; m];
        let mut w = vec![1; m];
        w[m - 1] = 2;
        let t: Vec<f64> = complexity_table(&x, &w, 10).into_iter().map(|r| r.1).collect();
        assert!(t[0] > t[1] && t[1] > t[3] && t[3] > t[2] && t[2] > t[4], "{t:?}");
    }
}
