//! Reference solutions, the cascade benchmark and the separation-tendency
//! study.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{cost_report, CostReport};
use crate::error::{Error, Result};
use crate::gen::{gen_cascade, gen_category, regulation, scenario, Category, GenSpec, ScenarioSpec};
use crate::problem::{ConstraintSet, MpcProblem, Partition, PartitionedProblem, Trajectory};
use crate::solver::{kkt_residual, solve_conventional, solve_structured, AdmmConfig, Solution, Status};
use crate::structure::analyze;
use crate::tuning::penalty_report;

pub const REFERENCE_TOL: f64 = 1e-10;
pub const REFERENCE_MAX_ITERS: usize = 200_000;
pub const REFERENCE_KKT_TOL: f64 = 1e-7;
/// Multiplier on the optimal penalty for reference runs; converges several
/// times faster than the unscaled value on the cascade scenarios.
pub const REFERENCE_PENALTY_SCALE: f64 = 10.0;

/// High-accuracy solution used as the ground truth for `dist`.
#[derive(Debug, Clone)]
pub struct Reference {
    pub trajectory: Trajectory,
    pub kkt: f64,
    pub iterations: usize,
    /// The ADMM result was refined by an equality-constrained solve on its
    /// active set.
    pub polished: bool,
}

fn bounds(set: &ConstraintSet, n: usize) -> (Vec<f64>, Vec<f64>) {
    match set {
        ConstraintSet::Box { lower, upper } => (lower.iter().copied().collect(), upper.iter().copied().collect()),
        _ => (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n]),
    }
}

/// Solves the KKT system with the components in `fixed` held at the given
/// values.
fn active_set_solve(pp: &PartitionedProblem, fixed: &[Option<f64>]) -> Option<Vec<f64>> {
    let s = &pp.subsystems[0];
    let h = s.hessian();
    let c = s.c_mat.to_dense();
    let n = h.nrows();
    let free: Vec<usize> = (0..n).filter(|&j| fixed[j].is_none()).collect();
    let ya = DVector::from_fn(n, |j, _| fixed[j].unwrap_or(0.0));
    let (nf, m) = (free.len(), c.nrows());
    let mut k = DMatrix::zeros(nf + m, nf + m);
    let mut rhs = DVector::zeros(nf + m);
    let hya = &h * &ya;
    let cya = &c * &ya;
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            k[(a, b)] = h[(i, j)];
        }
        for r in 0..m {
            k[(a, nf + r)] = c[(r, i)];
            k[(nf + r, a)] = c[(r, i)];
        }
        rhs[a] = -s.q[i] - hya[i];
    }
    for r in 0..m {
        rhs[nf + r] = s.c[r] - cya[r];
    }
    let sol = k.lu().solve(&rhs)?;
    let mut y: Vec<f64> = ya.iter().copied().collect();
    for (a, &i) in free.iter().enumerate() {
        y[i] = sol[a];
    }
    Some(y)
}

/// Conventional ADMM at [`REFERENCE_PENALTY_SCALE`] times the optimal
/// penalty to tight residuals, followed by a KKT check. If the check fails,
/// the active set of the ADMM iterate is polished with a direct solve and
/// checked again.
pub fn reference_solution(problem: &MpcProblem) -> Result<Reference> {
    reference_solution_with(problem, None, REFERENCE_MAX_ITERS)
}

/// As [`reference_solution`], with precomputed unscaled penalties (they only
/// depend on the weights, the dynamics and the horizon).
pub fn reference_solution_with(problem: &MpcProblem, rho: Option<&[f64]>, max_iters: usize) -> Result<Reference> {
    let pp = PartitionedProblem::conventional(problem)?;
    let rho = match rho {
        Some(r) => r.to_vec(),
        None => penalty_report(&pp)?.rho(),
    };
    let cfg = AdmmConfig {
        rho,
        beta: 1.0,
        penalty_scale: REFERENCE_PENALTY_SCALE,
        max_iters,
        tol_primal: REFERENCE_TOL,
        tol_dual: REFERENCE_TOL,
        ..Default::default()
    };
    let sol = solve_conventional(&pp, &cfg, None)?;
    let kkt = kkt_residual(problem, &sol.trajectory)?.max();
    if sol.status == Status::Converged && kkt <= REFERENCE_KKT_TOL {
        return Ok(Reference { trajectory: sol.trajectory, kkt, iterations: sol.iterations, polished: false });
    }

    let s = &pp.subsystems[0];
    let n = pp.ydim();
    let (xl, xu) = bounds(&s.xset, s.nx);
    let (ul, uu) = bounds(&s.uset, s.nu);
    let mut fixed = vec![None; n];
    for k in 0..pp.horizon {
        let (u, _, x) = s.stage_offsets(k);
        for (lo, hi, base) in [(&ul, &uu, u), (&xl, &xu, x)] {
            for j in 0..lo.len() {
                let z = sol.state.zeta[base + j];
                if z <= lo[j] {
                    fixed[base + j] = Some(lo[j]);
                } else if z >= hi[j] {
                    fixed[base + j] = Some(hi[j]);
                }
            }
        }
    }
    let polished = active_set_solve(&pp, &fixed).map(|y| pp.extract(&y));
    if let Some(t) = polished {
        let kkt_p = kkt_residual(problem, &t)?.max();
        if kkt_p <= REFERENCE_KKT_TOL {
            return Ok(Reference { trajectory: t, kkt: kkt_p, iterations: sol.iterations, polished: true });
        }
    }
    Err(Error::OracleNotConverged(format!("{} iterations, KKT residual {kkt:.3e}", sol.iterations)))
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn geometric_mean(v: &[f64]) -> f64 {
    (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
}

/// Linear-interpolated quantile of an unsorted sample, `q ∈ [0, 1]`.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub stages: usize,
    pub xi: usize,
    pub ui: usize,
    pub coupling_rank: usize,
    pub horizon: usize,
    pub scenarios: usize,
    pub seed: u64,
    pub penalty_scale: f64,
    pub beta: f64,
    /// Iteration cap for every convergence run.
    pub max_iters: usize,
    /// Runs stop once `dist` reaches this value; later budgets keep it.
    pub dist_floor: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            stages: 20,
            xi: 6,
            ui: 1,
            coupling_rank: 1,
            horizon: 5,
            scenarios: 200,
            seed: 1,
            penalty_scale: 90.0,
            beta: 0.5,
            max_iters: 20_000,
            dist_floor: 1e-12,
        }
    }
}

/// Distance after every iteration of one run; entry 0 is the start.
#[derive(Debug, Clone, Serialize)]
pub struct DistCurve {
    pub dist: Vec<f64>,
    pub reached_floor: bool,
}

impl DistCurve {
    fn from_solution(sol: &Solution, floor: f64) -> Self {
        let mut dist = vec![1.0];
        dist.extend(sol.trace.iter().map(|t| t.dist.unwrap_or(f64::NAN)));
        DistCurve { dist, reached_floor: sol.status == Status::TargetReached && floor > 0.0 }
    }

    /// Distance after `iters` iterations; a run that stopped early keeps its
    /// last value.
    pub fn at(&self, iters: usize) -> f64 {
        self.dist[iters.min(self.dist.len() - 1)]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioRun {
    pub index: usize,
    pub seed: u64,
    pub conventional: DistCurve,
    pub structured: DistCurve,
    pub reference_polished: bool,
}

/// Statistics of `dist` over scenarios at one sequential-op budget.
#[derive(Debug, Clone, Serialize)]
pub struct BudgetPoint {
    pub budget: u64,
    /// Per configuration (i), (ii), (iii): geometric mean, median, 10th and
    /// 90th percentile.
    pub geo_mean: [f64; 3],
    pub median: [f64; 3],
    pub p10: [f64; 3],
    pub p90: [f64; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct CascadeResult {
    pub separation_tendency: Option<f64>,
    pub cost: CostReport,
    pub runs: Vec<ScenarioRun>,
    /// Scenarios dropped because the reference solver failed.
    pub excluded: Vec<(usize, String)>,
}

/// Cascade system, scenarios, cost report and convergence runs of
/// conventional ADMM and the structured algorithm at scaled optimal
/// penalties.
pub fn bench_cascade(cfg: &CascadeConfig) -> Result<CascadeResult> {
    let (sys, partition) = gen_cascade(cfg.stages, cfg.xi, cfg.ui, cfg.coupling_rank, cfg.seed)?;
    let s = analyze(&sys, &partition)?.s;
    let sspec = ScenarioSpec { horizon: cfg.horizon, ..Default::default() };
    let first = scenario(&sys, &sspec, cfg.seed)?;
    let cost = cost_report(&first, &partition, cfg.beta, None)?;
    let rho_conv = penalty_report(&PartitionedProblem::conventional(&first)?)?.rho();
    let rho_st = penalty_report(&PartitionedProblem::new(&first, &partition)?)?.rho();
    let pen = Penalties { conventional: rho_conv, structured: rho_st };

    let results: Vec<(usize, u64, Result<ScenarioRun>)> = (0..cfg.scenarios)
        .into_par_iter()
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k as u64);
            (k, seed, run_scenario(cfg, &sys, &partition, &sspec, &pen, k, seed))
        })
        .collect();
    let mut runs = Vec::new();
    let mut excluded = Vec::new();
    for (k, _, r) in results {
        match r {
            Ok(run) => runs.push(run),
            Err(Error::OracleNotConverged(msg)) => excluded.push((k, msg)),
            Err(e) => return Err(e),
        }
    }
    Ok(CascadeResult { separation_tendency: s, cost, runs, excluded })
}

/// Unscaled optimal penalties, shared by all scenarios of one system.
struct Penalties {
    conventional: Vec<f64>,
    structured: Vec<f64>,
}

fn run_scenario(
    cfg: &CascadeConfig,
    sys: &crate::problem::LtiSystem,
    partition: &Partition,
    sspec: &ScenarioSpec,
    pen: &Penalties,
    index: usize,
    seed: u64,
) -> Result<ScenarioRun> {
    let problem = scenario(sys, sspec, seed)?;
    let reference = reference_solution_with(&problem, Some(&pen.conventional), REFERENCE_MAX_ITERS)?;
    let run_cfg = |rho: Vec<f64>, beta: f64| AdmmConfig {
        rho,
        beta,
        max_iters: cfg.max_iters,
        penalty_scale: cfg.penalty_scale,
        record_trace: true,
        reference: Some(reference.trajectory.clone()),
        dist_target: Some(cfg.dist_floor),
        ..Default::default()
    };
    let conv_pp = PartitionedProblem::conventional(&problem)?;
    let conv = solve_conventional(&conv_pp, &run_cfg(pen.conventional.clone(), 1.0), None)?;
    let pp = PartitionedProblem::new(&problem, partition)?;
    let st = solve_structured(&pp, &run_cfg(pen.structured.clone(), cfg.beta), None)?;
    Ok(ScenarioRun {
        index,
        seed,
        conventional: DistCurve::from_solution(&conv, cfg.dist_floor),
        structured: DistCurve::from_solution(&st, cfg.dist_floor),
        reference_polished: reference.polished,
    })
}

impl CascadeResult {
    /// Per-iteration costs of (i), (ii), (iii).
    pub fn costs(&self) -> [u64; 3] {
        [self.cost.conventional, self.cost.structured_single, self.cost.structured_parallel]
    }

    /// `dist` statistics at the given sequential-op budgets. Configuration
    /// (iii) runs the same iterates as (ii) at its own per-iteration cost.
    pub fn at_budgets(&self, budgets: &[u64]) -> Vec<BudgetPoint> {
        let c = self.costs();
        budgets
            .iter()
            .map(|&b| {
                let mut vals: [Vec<f64>; 3] = Default::default();
                for r in &self.runs {
                    vals[0].push(r.conventional.at((b / c[0]) as usize));
                    vals[1].push(r.structured.at((b / c[1]) as usize));
                    vals[2].push(r.structured.at((b / c[2]) as usize));
                }
                let f = |g: &dyn Fn(&[f64]) -> f64| [g(&vals[0]), g(&vals[1]), g(&vals[2])];
                BudgetPoint {
                    budget: b,
                    geo_mean: f(&|v| geometric_mean(&v.iter().map(|x| x.max(f64::MIN_POSITIVE)).collect::<Vec<_>>())),
                    median: f(&|v| quantile(v, 0.5)),
                    p10: f(&|v| quantile(v, 0.1)),
                    p90: f(&|v| quantile(v, 0.9)),
                }
            })
            .collect()
    }

    /// Budgets from `first_iters` structured single-thread iterations up to
    /// the point where the conventional median reaches `stop_dist` (or its
    /// runs end), `points` of them, geometrically spaced.
    pub fn budget_grid(&self, first_iters: u64, stop_dist: f64, points: usize) -> Vec<u64> {
        let c = self.costs();
        let longest = self.runs.iter().map(|r| r.conventional.dist.len() - 1).max().unwrap_or(0) as u64;
        let mut end = longest * c[0];
        for it in 0..=longest {
            let med = quantile(&self.runs.iter().map(|r| r.conventional.at(it as usize)).collect::<Vec<_>>(), 0.5);
            if med <= stop_dist {
                end = it * c[0];
                break;
            }
        }
        let start = first_iters * c[1];
        if end <= start || points < 2 {
            return vec![start];
        }
        let ratio = (end as f64 / start as f64).powf(1.0 / (points - 1) as f64);
        let mut out: Vec<u64> = (0..points).map(|k| (start as f64 * ratio.powi(k as i32)).round() as u64).collect();
        out.dedup();
        out
    }
}

/// How penalties are chosen in the study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RhoPolicy {
    Unit,
    Optimal,
    OptimalScaled(f64),
}

impl RhoPolicy {
    pub fn config(&self, pp: &PartitionedProblem) -> Result<(Vec<f64>, f64)> {
        Ok(match self {
            RhoPolicy::Unit => (vec![1.0], 1.0),
            RhoPolicy::Optimal => (penalty_report(pp)?.rho(), 1.0),
            RhoPolicy::OptimalScaled(s) => (penalty_report(pp)?.rho(), *s),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub categories: Vec<Category>,
    pub dims: Vec<usize>,
    pub seeds: usize,
    pub initial_conditions: usize,
    pub horizon: usize,
    pub dist_target: f64,
    pub rho: RhoPolicy,
    pub beta: f64,
    pub max_iters: usize,
    pub base_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            categories: Category::STUDY.to_vec(),
            dims: vec![5, 10],
            seeds: 5,
            initial_conditions: 5,
            horizon: 10,
            dist_target: 1e-4,
            rho: RhoPolicy::Unit,
            beta: 0.5,
            max_iters: 50_000,
            base_seed: 1,
        }
    }
}

impl StudyConfig {
    fn validate(&self) -> Result<()> {
        if !(self.dist_target > 0.0 && self.dist_target < 1.0) {
            return Err(Error::InvalidConfig(format!("dist target {} outside (0, 1)", self.dist_target)));
        }
        if self.seeds == 0 || self.initial_conditions == 0 || self.categories.is_empty() || self.dims.is_empty() {
            return Err(Error::InvalidConfig("study needs at least one category, dimension, seed and initial condition".into()));
        }
        Ok(())
    }
}

/// Number of subsystems used for a study system with `nx` states: blocks of
/// about four states, at least two.
pub fn study_blocks(nx: usize) -> usize {
    ((nx + 3) / 4).max(2).min(nx)
}

#[derive(Debug, Clone, Serialize)]
pub struct StudySystem {
    pub spec: GenSpec,
    pub s: Option<f64>,
    pub controllable: bool,
    pub iters_conventional: Vec<usize>,
    pub iters_structured: Vec<usize>,
    /// Geometric mean over initial conditions of the iteration ratio.
    pub increase_factor: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyResult {
    pub systems: Vec<StudySystem>,
    pub spearman: Option<f64>,
}

impl StudyResult {
    pub fn pairs(&self) -> (Vec<f64>, Vec<f64>) {
        self.systems.iter().filter_map(|s| Some((s.s?, s.increase_factor?))).unzip()
    }
}

/// Iterations until `dist ≤ target`, or `None` if `max_iters` ran out.
fn iterations_to_target(sol: &Solution) -> Option<usize> {
    (sol.status == Status::TargetReached).then_some(sol.iterations)
}

/// Runs both algorithms on regulation problems of every generated system
/// and correlates the separation tendency with the iteration increase.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let mut specs = Vec::new();
    for (ci, &cat) in cfg.categories.iter().enumerate() {
        for (di, &nx) in cfg.dims.iter().enumerate() {
            for k in 0..cfg.seeds {
                let seed = cfg.base_seed.wrapping_add((ci * 10_000 + di * 1_000 + k) as u64);
                specs.push(GenSpec::even(cat, nx, study_blocks(nx), seed));
            }
        }
    }
    let systems = specs.into_par_iter().map(|spec| study_system(cfg, spec)).collect::<Result<Vec<_>>>()?;
    let mut res = StudyResult { systems, spearman: None };
    let (s, f) = res.pairs();
    res.spearman = spearman(&s, &f);
    Ok(res)
}

fn study_system(cfg: &StudyConfig, spec: GenSpec) -> Result<StudySystem> {
    let (sys, partition) = gen_category(&spec)?;
    let report = analyze(&sys, &partition)?;
    let mut out = StudySystem {
        spec: spec.clone(),
        s: report.s,
        controllable: report.controllable,
        iters_conventional: Vec::new(),
        iters_structured: Vec::new(),
        increase_factor: None,
        skipped: None,
    };
    if report.s.is_none() {
        out.skipped = Some("separation tendency undefined".into());
        return Ok(out);
    }
    if !report.controllable {
        out.skipped = Some("not controllable".into());
        return Ok(out);
    }
    let mut ratios = Vec::new();
    for ic in 0..cfg.initial_conditions {
        let problem = regulation(&sys, cfg.horizon, spec.seed.wrapping_mul(1_000).wrapping_add(ic as u64))?;
        let reference = match reference_solution(&problem) {
            Ok(r) => r,
            Err(Error::OracleNotConverged(m)) => {
                out.skipped = Some(format!("reference failed: {m}"));
                return Ok(out);
            }
            Err(e) => return Err(e),
        };
        let run = |pp: &PartitionedProblem, beta: f64| -> Result<Solution> {
            let (rho, scale) = cfg.rho.config(pp)?;
            let c = AdmmConfig {
                rho,
                beta,
                penalty_scale: scale,
                max_iters: cfg.max_iters,
                reference: Some(reference.trajectory.clone()),
                dist_target: Some(cfg.dist_target),
                ..Default::default()
            };
            if pp.m() == 1 {
                solve_conventional(pp, &c, None)
            } else {
                solve_structured(pp, &c, None)
            }
        };
        let conv = run(&PartitionedProblem::conventional(&problem)?, 1.0)?;
        let st = run(&PartitionedProblem::new(&problem, &partition)?, cfg.beta)?;
        match (iterations_to_target(&conv), iterations_to_target(&st)) {
            (Some(a), Some(b)) => {
                out.iters_conventional.push(a);
                out.iters_structured.push(b);
                ratios.push(b as f64 / a as f64);
            }
            _ => {
                out.skipped = Some(format!("no convergence within {} iterations", cfg.max_iters));
                return Ok(out);
            }
        }
    }
    out.increase_factor = Some(geometric_mean(&ratios));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn quantiles() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert!((quantile(&v, 0.1) - 1.4).abs() < 1e-12);
        assert!((geometric_mean(&[1.0, 4.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn study_blocks_examples() {
        assert_eq!(study_blocks(5), 2);
        assert_eq!(study_blocks(10), 3);
        assert_eq!(study_blocks(40), 10);
    }
}
