//! Conventional and structure-exploiting ADMM.

mod cache;
mod kkt;

pub use cache::{IterationCounts, SolverCache};
pub use kkt::{kkt_residual, KktResidual};

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::ops::{NoTally, OpCount, Tally};
use crate::problem::{ConstraintSet, PartitionedProblem, Trajectory};
use cache::IterInput;

#[derive(Debug, Clone)]
pub struct AdmmConfig {
    /// Per-subsystem penalties; a single value is broadcast to all subsystems.
    pub rho: Vec<f64>,
    pub beta: f64,
    pub max_iters: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    /// Multiplier applied to every entry of `rho`.
    pub penalty_scale: f64,
    /// Run the per-subsystem steps on the rayon pool.
    pub parallel: bool,
    pub record_trace: bool,
    /// Record constraint residuals after every iteration.
    pub check_invariants: bool,
    /// Solution used for the relative distance in the trace.
    pub reference: Option<Trajectory>,
    /// Stop as soon as the distance to `reference` drops to this value
    /// instead of using the residual tolerances.
    pub dist_target: Option<f64>,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: vec![1.0],
            beta: 0.5,
            max_iters: 10_000,
            tol_primal: 1e-6,
            tol_dual: 1e-6,
            penalty_scale: 1.0,
            parallel: false,
            record_trace: false,
            check_invariants: false,
            reference: None,
            dist_target: None,
        }
    }
}

impl AdmmConfig {
    pub fn with_rho(rho: Vec<f64>, beta: f64) -> Self {
        AdmmConfig { rho, beta, ..Default::default() }
    }

    /// Effective penalties `ρ_i · scale` for `m` subsystems.
    pub fn effective_rho(&self, m: usize) -> Result<Vec<f64>> {
        let base = match self.rho.len() {
            1 => vec![self.rho[0]; m],
            n if n == m => self.rho.clone(),
            n => return Err(Error::InvalidConfig(format!("{n} penalty parameters for {m} subsystems"))),
        };
        if !(self.penalty_scale > 0.0) {
            return Err(Error::InvalidConfig(format!("penalty scale {} is not positive", self.penalty_scale)));
        }
        Ok(base.into_iter().map(|r| r * self.penalty_scale).collect())
    }
}

/// ADMM iterate. `eps` and `lambda_eps` are empty when the second copy is
/// inactive (conventional ADMM, or `β = 1`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmmState {
    pub y: Vec<f64>,
    pub zeta: Vec<f64>,
    pub eps: Vec<f64>,
    pub lambda_zeta: Vec<f64>,
    pub lambda_eps: Vec<f64>,
    pub iter: usize,
}

impl AdmmState {
    pub fn zeros(ydim: usize, with_eps: bool) -> Self {
        let e = if with_eps { ydim } else { 0 };
        AdmmState {
            y: vec![0.0; ydim],
            zeta: vec![0.0; ydim],
            eps: vec![0.0; e],
            lambda_zeta: vec![0.0; ydim],
            lambda_eps: vec![0.0; e],
            iter: 0,
        }
    }
}

/// Constraint residuals of one iterate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Invariants {
    /// `max_i ‖C_i y_i − c_i‖∞`.
    pub dynamics: f64,
    pub zeta_in_set: bool,
    /// `‖Dε − d‖∞` (zero when `ε` is inactive).
    pub coupling: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterTrace {
    pub iter: usize,
    pub r_zeta: f64,
    pub r_eps: f64,
    pub r_dual: f64,
    pub objective: f64,
    pub dist: Option<f64>,
    pub cum_ops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invariants: Option<Invariants>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Status {
    Converged,
    TargetReached,
    /// `max_iters` reached with residuals above the tolerances.
    NonConvergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Warning {
    /// `β` was set but conventional ADMM has no use for it.
    BetaIgnored,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub trajectory: Trajectory,
    pub state: AdmmState,
    pub status: Status,
    pub iterations: usize,
    pub trace: Vec<IterTrace>,
    pub warnings: Vec<Warning>,
    /// Sequential operation count of one iteration.
    pub ops_per_iteration: OpCount,
    /// Worst residuals over all iterations when invariants are checked.
    pub worst_invariants: Option<Invariants>,
}

/// `‖[x; u] − [x*; u*]‖² / ‖[x*; u*]‖²`.
pub fn dist(traj: &Trajectory, reference: &Trajectory) -> Result<f64> {
    let r = reference.flatten();
    let den: f64 = r.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = traj.flatten().iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num / den)
}

/// Element-wise `median(lower, z, upper)`; other sets use their own projection.
pub fn project_box(z: &[f64], set: &ConstraintSet) -> Vec<f64> {
    set.project(z)
}

fn split_mut<'a>(mut v: &'a mut [f64], lens: impl Iterator<Item = usize>) -> Vec<&'a mut [f64]> {
    let mut out = Vec::new();
    for l in lens {
        let (a, b) = v.split_at_mut(l);
        out.push(a);
        v = b;
    }
    out
}

/// One structured iteration (steps 2.1–2.4) over the unit kernels.
/// With `counts`, runs sequentially and records per-unit operation counts.
pub(crate) fn iterate(pp: &PartitionedProblem, cache: &SolverCache, st: &mut AdmmState, parallel: bool, counts: Option<&mut IterationCounts>) {
    let mut counts = counts;
    let AdmmState { y, zeta, eps, lambda_zeta, lambda_eps, iter } = st;
    let input = IterInput { zeta: &zeta[..], lambda_zeta: &lambda_zeta[..], eps: &eps[..], lambda_eps: &lambda_eps[..] };

    // 2.1
    let y_parts = split_mut(y, cache.kkt.iter().map(|k| k.n));
    if let Some(c) = counts.as_deref_mut() {
        for (i, yi) in y_parts.into_iter().enumerate() {
            let mut t = OpCount::ZERO;
            cache.qp_unit(i, &input, yi, &mut t);
            c.qp.push(t);
        }
    } else if parallel {
        y_parts.into_par_iter().enumerate().for_each(|(i, yi)| cache.qp_unit(i, &input, yi, &mut NoTally));
    } else {
        for (i, yi) in y_parts.into_iter().enumerate() {
            cache.qp_unit(i, &input, yi, &mut NoTally);
        }
    }
    let y: &[f64] = y;

    // 2.2
    let z_parts = split_mut(zeta, cache.projection_units.iter().map(|u| u.1.len()));
    if let Some(c) = counts.as_deref_mut() {
        for (u, z) in z_parts.into_iter().enumerate() {
            let mut t = OpCount::ZERO;
            cache.projection_unit(pp, u, y, lambda_zeta, z, &mut t);
            c.projection.push(t);
        }
    } else if parallel {
        z_parts.into_par_iter().enumerate().for_each(|(u, z)| cache.projection_unit(pp, u, y, lambda_zeta, z, &mut NoTally));
    } else {
        for (u, z) in z_parts.into_iter().enumerate() {
            cache.projection_unit(pp, u, y, lambda_zeta, z, &mut NoTally);
        }
    }

    // 2.3
    if cache.eps_active {
        let results: Vec<Vec<f64>> = if let Some(c) = counts.as_deref_mut() {
            (0..cache.coupling.len())
                .map(|u| {
                    let mut t = OpCount::ZERO;
                    let r = cache.coupling_unit(u, y, lambda_eps, &mut t);
                    c.coupling.push(t);
                    r
                })
                .collect()
        } else if parallel {
            (0..cache.coupling.len()).into_par_iter().map(|u| cache.coupling_unit(u, y, lambda_eps, &mut NoTally)).collect()
        } else {
            (0..cache.coupling.len()).map(|u| cache.coupling_unit(u, y, lambda_eps, &mut NoTally)).collect()
        };
        for (u, vals) in results.into_iter().enumerate() {
            for (&j, v) in cache.coupling[u].vars.iter().zip(vals) {
                eps[j] = v;
            }
        }
    }

    // 2.4
    for u in 0..cache.dual_units.len() {
        let mut t = OpCount::ZERO;
        cache.dual_unit(u, y, zeta, lambda_zeta, &mut t);
        if let Some(c) = counts.as_deref_mut() {
            c.dual.push(t);
        }
    }
    if cache.eps_active {
        for u in 0..cache.dual_units.len() {
            let mut t = OpCount::ZERO;
            cache.dual_unit(u, y, eps, lambda_eps, &mut t);
            if let Some(c) = counts.as_deref_mut() {
                c.dual.push(t);
            }
        }
    }
    *iter += 1;
}

fn invariants(pp: &PartitionedProblem, st: &AdmmState) -> Invariants {
    let dynamics = (0..pp.m()).map(|i| pp.dynamics_residual(i, &st.y[pp.range(i)])).fold(0.0, f64::max);
    Invariants {
        dynamics,
        zeta_in_set: pp.in_constraint_set(&st.zeta),
        coupling: if st.eps.is_empty() { 0.0 } else { pp.coupling_residual(&st.eps) },
    }
}

fn worse(a: Option<Invariants>, b: Invariants) -> Invariants {
    match a {
        None => b,
        Some(a) => Invariants {
            dynamics: a.dynamics.max(b.dynamics),
            zeta_in_set: a.zeta_in_set && b.zeta_in_set,
            coupling: a.coupling.max(b.coupling),
        },
    }
}

fn check_init(init: &AdmmState, ydim: usize, with_eps: bool) -> Result<()> {
    let e = if with_eps { ydim } else { 0 };
    let ok = init.y.len() == ydim
        && init.zeta.len() == ydim
        && init.lambda_zeta.len() == ydim
        && init.eps.len() == e
        && init.lambda_eps.len() == e;
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch("initial state does not match the problem".into()))
    }
}

/// Drives an iteration function until termination.
fn run(
    pp: &PartitionedProblem,
    cfg: &AdmmConfig,
    rho: &[f64],
    beta: f64,
    mut st: AdmmState,
    ops: OpCount,
    mut step: impl FnMut(&mut AdmmState),
) -> Result<Solution> {
    if let (Some(_), None) = (cfg.dist_target, &cfg.reference) {
        return Err(Error::InvalidConfig("dist_target requires a reference solution".into()));
    }
    let mut trace = Vec::new();
    let mut worst = None;
    let mut status = Status::NonConvergence;
    let with_eps = !st.eps.is_empty();
    while st.iter < cfg.max_iters {
        let zeta_prev = st.zeta.clone();
        let eps_prev = st.eps.clone();
        step(&mut st);

        let r_zeta = norm2(&st.y.iter().zip(&st.zeta).map(|(a, b)| a - b).collect::<Vec<_>>());
        let r_eps = if with_eps { norm2(&st.y.iter().zip(&st.eps).map(|(a, b)| a - b).collect::<Vec<_>>()) } else { 0.0 };
        let mut dual = 0.0;
        for (i, s) in pp.subsystems.iter().enumerate() {
            for j in s.offset..s.offset + s.ydim() {
                let dz = st.zeta[j] - zeta_prev[j];
                let v = if with_eps { rho[i] * (beta * dz + (1.0 - beta) * (st.eps[j] - eps_prev[j])) } else { rho[i] * dz };
                dual += v * v;
            }
        }
        let r_dual = dual.sqrt();
        let d = match &cfg.reference {
            Some(r) => Some(dist(&pp.extract(&st.y), r)?),
            None => None,
        };
        let inv = cfg.check_invariants.then(|| invariants(pp, &st));
        if let Some(v) = inv {
            worst = Some(worse(worst, v));
        }
        if cfg.record_trace {
            trace.push(IterTrace {
                iter: st.iter,
                r_zeta,
                r_eps,
                r_dual,
                objective: pp.objective(&st.y),
                dist: d,
                cum_ops: ops.total() * st.iter as u64,
                invariants: inv,
            });
        }
        match (cfg.dist_target, d) {
            (Some(target), Some(d)) => {
                if d <= target {
                    status = Status::TargetReached;
                    break;
                }
            }
            _ => {
                if r_zeta <= cfg.tol_primal && r_eps <= cfg.tol_primal && r_dual <= cfg.tol_dual {
                    status = Status::Converged;
                    break;
                }
            }
        }
    }
    if status == Status::NonConvergence {
        warn!("ADMM stopped after {} iterations without meeting the tolerances", st.iter);
    }
    Ok(Solution {
        trajectory: pp.extract(&st.y),
        iterations: st.iter,
        state: st,
        status,
        trace,
        warnings: Vec::new(),
        ops_per_iteration: ops,
        worst_invariants: worst,
    })
}

/// Conventional ADMM on the single-subsystem form.
pub fn solve_conventional(pp: &PartitionedProblem, cfg: &AdmmConfig, init: Option<AdmmState>) -> Result<Solution> {
    if pp.m() != 1 {
        return Err(Error::InvalidConfig(format!("conventional ADMM needs the trivial partition, got M = {}", pp.m())));
    }
    let rho = cfg.effective_rho(1)?;
    let cache = SolverCache::new(pp, &rho, 1.0, false)?;
    let st = init.unwrap_or_else(|| AdmmState::zeros(pp.ydim(), false));
    check_init(&st, pp.ydim(), false)?;

    let ops = {
        let mut scratch = st.clone();
        let mut t = OpCount::ZERO;
        conventional_step(pp, &cache, &mut scratch, &mut t);
        t
    };
    let mut sol = run(pp, cfg, &rho, 1.0, st, ops, |s| conventional_step(pp, &cache, s, &mut NoTally))?;
    if cfg.beta != 1.0 {
        sol.warnings.push(Warning::BetaIgnored);
    }
    Ok(sol)
}

/// Steps 1.1–1.3.
pub fn conventional_step<T: Tally>(pp: &PartitionedProblem, cache: &SolverCache, st: &mut AdmmState, t: &mut T) {
    let mut parts = [OpCount::ZERO; 3];
    conventional_parts(pp, cache, st, &mut parts);
    t.add(parts.iter().map(|p| p.adds).sum(), parts.iter().map(|p| p.muls).sum());
}

fn conventional_parts(pp: &PartitionedProblem, cache: &SolverCache, st: &mut AdmmState, t: &mut [OpCount; 3]) {
    let input = IterInput { zeta: &st.zeta, lambda_zeta: &st.lambda_zeta, eps: &[], lambda_eps: &[] };
    cache.qp_unit(0, &input, &mut st.y, &mut t[0]);
    let s = &pp.subsystems[0];
    for j in 0..st.y.len() {
        st.zeta[j] = st.y[j] - st.lambda_zeta[j];
    }
    t[1].add(st.y.len() as u64, 0);
    s.project(&mut st.zeta, &mut t[1]);
    for j in 0..st.y.len() {
        st.lambda_zeta[j] -= st.y[j] - st.zeta[j];
    }
    t[2].add(2 * st.y.len() as u64, 0);
    st.iter += 1;
}

/// Per-step operation counts of one conventional iteration (run on a copy
/// of `state`).
pub fn count_conventional_iteration(pp: &PartitionedProblem, cache: &SolverCache, state: &AdmmState) -> IterationCounts {
    let mut s = state.clone();
    let mut parts = [OpCount::ZERO; 3];
    conventional_parts(pp, cache, &mut s, &mut parts);
    IterationCounts { qp: vec![parts[0]], projection: vec![parts[1]], coupling: Vec::new(), dual: vec![parts[2]], ..Default::default() }
}

/// Checks the `(M, β)` combination and returns whether `ε` is active.
pub fn check_beta(m: usize, beta: f64) -> Result<bool> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidConfig(format!("beta = {beta} outside (0, 1]")));
    }
    if beta == 1.0 && m > 1 {
        return Err(Error::InvalidBeta(m));
    }
    Ok(beta < 1.0)
}

/// Structure-exploiting ADMM (steps 2.1–2.4).
pub fn solve_structured(pp: &PartitionedProblem, cfg: &AdmmConfig, init: Option<AdmmState>) -> Result<Solution> {
    let with_eps = check_beta(pp.m(), cfg.beta)?;
    let rho = cfg.effective_rho(pp.m())?;
    let cache = SolverCache::new(pp, &rho, cfg.beta, with_eps)?;
    solve_with_cache(pp, &cache, cfg, init)
}

/// Structure-exploiting ADMM with a prebuilt cache (whose `ρ_i`, `β` take
/// precedence over `cfg`).
pub fn solve_with_cache(pp: &PartitionedProblem, cache: &SolverCache, cfg: &AdmmConfig, init: Option<AdmmState>) -> Result<Solution> {
    let st = init.unwrap_or_else(|| AdmmState::zeros(pp.ydim(), cache.eps_active));
    check_init(&st, pp.ydim(), cache.eps_active)?;
    let ops = cache.count_iteration(pp, &st).total();
    let parallel = cfg.parallel;
    run(pp, cfg, &cache.rho, cache.beta, st, ops, |s| iterate(pp, cache, s, parallel, None))
}

/// Builds the cache for the structured algorithm from a config.
pub fn structured_cache(pp: &PartitionedProblem, cfg: &AdmmConfig) -> Result<SolverCache> {
    let with_eps = check_beta(pp.m(), cfg.beta)?;
    SolverCache::new(pp, &cfg.effective_rho(pp.m())?, cfg.beta, with_eps)
}

/// Performs a single structured iteration in place.
pub fn structured_step(pp: &PartitionedProblem, cache: &SolverCache, st: &mut AdmmState) {
    iterate(pp, cache, st, false, None)
}
