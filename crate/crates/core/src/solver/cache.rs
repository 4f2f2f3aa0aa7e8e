//! Precomputed factorizations and the per-work-unit kernels of one ADMM
//! iteration.
//!
//! Kernels are grouped into the units that may execute independently:
//! the subsystem QP (one unit per subsystem), the set projection (one unit
//! per subsystem, stage and `{U ∪ W, X}` part), the coupling projection (one
//! unit per time block, or per subsystem and time block when each subsystem
//! drives at most one virtual input) and the dual update (one unit per
//! subsystem, stage and copy).

use std::ops::Range;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{Ldl, SparseRows};
use crate::ops::{OpCount, Tally};
use crate::problem::PartitionedProblem;

const PIVOT_TOL: f64 = 1e-13;

/// Closed-form solver of the equality-constrained subsystem QP
/// `min ½yᵀ𝒬y + qᵀy + ρ/2‖y − v‖² s.t. Cy = c`.
#[derive(Debug, Clone)]
pub(crate) struct KktCache {
    pub offset: usize,
    pub n: usize,
    stage: usize,
    /// `−q/ρ`.
    neg_q_scaled: Vec<f64>,
    /// `(𝒬_stage/ρ + I)`.
    stage_factor: Ldl,
    c_mat: SparseRows,
    c_t: SparseRows,
    c: Vec<f64>,
    /// `C (𝒬/ρ + I)⁻¹ Cᵀ`.
    schur: Ldl,
}

impl KktCache {
    fn new(pp: &PartitionedProblem, i: usize, rho: f64) -> Result<Self> {
        let s = &pp.subsystems[i];
        let stage = s.stage_len();
        let n = s.ydim();
        let mut scaled = &s.stage_hessian / rho;
        for d in 0..stage {
            scaled[(d, d)] += 1.0;
        }
        let stage_factor = Ldl::factor(&scaled, PIVOT_TOL).ok_or(Error::NotPositiveDefinite(0.0))?;
        let pinv = scaled.try_inverse().ok_or(Error::NotPositiveDefinite(0.0))?;

        // Schur complement, block tridiagonal over the time blocks of C
        let rows = s.c_mat.nrows();
        let mut schur = DMatrix::zeros(rows, rows);
        let mut pct = vec![0.0; n];
        for a in 0..rows {
            pct.iter_mut().for_each(|v| *v = 0.0);
            for (col, v) in s.c_mat.row(a) {
                let (k, l) = (col / stage, col % stage);
                for m in 0..stage {
                    pct[k * stage + m] += pinv[(m, l)] * v;
                }
            }
            let ka = a / s.nx;
            let lo = ka.saturating_sub(1) * s.nx;
            let hi = ((ka + 2) * s.nx).min(rows);
            for b in lo..hi {
                schur[(a, b)] = s.c_mat.row(b).map(|(col, v)| v * pct[col]).sum();
            }
        }
        let schur = (&schur + schur.transpose()) * 0.5;
        let schur = Ldl::factor(&schur, PIVOT_TOL).ok_or(Error::RankDefect {
            rank: crate::linalg::numerical_rank(&s.c_mat.to_dense(), 1e-12),
            expected: rows,
        })?;
        Ok(KktCache {
            offset: s.offset,
            n,
            stage,
            neg_q_scaled: s.q.iter().map(|v| -v / rho).collect(),
            stage_factor,
            c_t: s.c_mat.transpose(),
            c_mat: s.c_mat.clone(),
            c: s.c.iter().copied().collect(),
            schur,
        })
    }

    fn stage_solve<T: Tally>(&self, v: &mut [f64], t: &mut T) {
        for chunk in v.chunks_mut(self.stage) {
            self.stage_factor.solve_in_place(chunk, t);
        }
    }

    /// Solves the subsystem QP for the regularization point `v`
    /// (already holding `−q/ρ + …`), writing the minimizer into `y`.
    fn solve<T: Tally>(&self, v: &mut [f64], y: &mut [f64], t: &mut T) {
        // h = P v
        self.stage_solve(v, t);
        let mut r = vec![0.0; self.c.len()];
        self.c_mat.mul_vec_into(v, Some(&self.c), &mut r, t);
        self.schur.solve_in_place(&mut r, t);
        self.c_t.mul_vec_into(&r, None, y, t);
        self.stage_solve(y, t);
        for (yj, hj) in y.iter_mut().zip(v.iter()) {
            *yj = hj - *yj;
        }
        t.add(self.n as u64, 0);
    }
}

/// Affine projection onto the coupling rows of one work unit.
#[derive(Debug, Clone)]
pub(crate) struct CouplingUnit {
    /// Every `ε` entry written by this unit (including uncoupled ones).
    pub vars: Vec<usize>,
    /// Time block the unit belongs to.
    pub block: usize,
    /// Entries touched by coupling rows, as positions into `vars`.
    group: Vec<usize>,
    d_local: SparseRows,
    rhs: Vec<f64>,
    factor: Option<Ldl>,
    /// `E⁻¹ Dᵀ` restricted to `group`.
    f_local: SparseRows,
}

impl CouplingUnit {
    fn new(pp: &PartitionedProblem, rows: Vec<usize>, mut vars: Vec<usize>, weight: &[f64], block: usize) -> Result<Self> {
        vars.sort_unstable();
        vars.dedup();
        let mut group: Vec<usize> = Vec::new();
        let mut local = std::collections::HashMap::new();
        for &r in &rows {
            for &(j, _) in &pp.coupling[r].entries {
                if !local.contains_key(&j) {
                    let pos = vars.binary_search(&j).expect("coupling variable outside its unit");
                    local.insert(j, group.len());
                    group.push(pos);
                }
            }
        }
        let d_rows: Vec<Vec<(usize, f64)>> =
            rows.iter().map(|&r| pp.coupling[r].entries.iter().map(|&(j, v)| (local[&j], v)).collect()).collect();
        let d_local = SparseRows::from_rows(group.len(), &d_rows);
        let einv: Vec<f64> = group.iter().map(|&p| 1.0 / weight[vars[p]]).collect();
        let mut s = DMatrix::zeros(rows.len(), rows.len());
        let dd = d_local.to_dense();
        for a in 0..rows.len() {
            for b in 0..rows.len() {
                s[(a, b)] = (0..group.len()).map(|g| dd[(a, g)] * einv[g] * dd[(b, g)]).sum();
            }
        }
        let factor = if rows.is_empty() {
            None
        } else {
            Some(Ldl::factor(&s, 1e-12).ok_or(Error::SingularCoupling(block + 1))?)
        };
        let f_rows: Vec<Vec<(usize, f64)>> = (0..group.len())
            .map(|g| (0..rows.len()).filter(|&a| dd[(a, g)] != 0.0).map(|a| (a, dd[(a, g)] * einv[g])).collect())
            .collect();
        Ok(CouplingUnit {
            vars,
            block,
            group,
            d_local,
            rhs: rows.iter().map(|&r| pp.coupling[r].rhs).collect(),
            factor,
            f_local: SparseRows::from_rows(rows.len(), &f_rows),
        })
    }

    /// Projects `v` (indexed like `vars`) in place.
    fn project<T: Tally>(&self, v: &mut [f64], t: &mut T) {
        let Some(factor) = &self.factor else { return };
        let g: Vec<f64> = self.group.iter().map(|&p| v[p]).collect();
        let mut r = vec![0.0; self.rhs.len()];
        self.d_local.mul_vec_into(&g, Some(&self.rhs), &mut r, t);
        factor.solve_in_place(&mut r, t);
        let mut corr = vec![0.0; g.len()];
        self.f_local.mul_vec_into(&r, None, &mut corr, t);
        for (k, &p) in self.group.iter().enumerate() {
            v[p] -= corr[k];
        }
        t.add(g.len() as u64, 0);
    }
}

/// Scalar operation counts of one iteration, per step and work unit.
#[derive(Debug, Clone, Default, Serialize)]
pub struct IterationCounts {
    /// Subsystem QPs (steps 1.1 / 2.1), one entry per subsystem.
    pub qp: Vec<OpCount>,
    /// Set projection, one entry per (subsystem, stage, part).
    pub projection: Vec<OpCount>,
    /// Coupling projection, one entry per work unit.
    pub coupling: Vec<OpCount>,
    /// Dual update, one entry per (subsystem, stage, copy).
    pub dual: Vec<OpCount>,
    /// Time block of each coupling unit.
    pub coupling_blocks: Vec<usize>,
    /// Coupling units correspond to single subsystems.
    pub coupling_per_subsystem: bool,
}

impl IterationCounts {
    pub fn total(&self) -> OpCount {
        self.qp.iter().chain(&self.projection).chain(&self.coupling).chain(&self.dual).copied().sum()
    }
}

/// Everything precomputed for a given partitioned problem, `ρ_i` and `β`.
#[derive(Debug, Clone)]
pub struct SolverCache {
    pub(crate) rho: Vec<f64>,
    pub(crate) beta: f64,
    pub(crate) kkt: Vec<KktCache>,
    pub(crate) coupling: Vec<CouplingUnit>,
    /// Projection units: (subsystem, global range, is_state_part).
    pub(crate) projection_units: Vec<(usize, Range<usize>, bool)>,
    /// Dual update units over `y` index ranges.
    pub(crate) dual_units: Vec<Range<usize>>,
    pub(crate) eps_active: bool,
    pub(crate) coupling_per_subsystem: bool,
}

impl SolverCache {
    /// `rho` holds the effective per-subsystem penalties; `eps_active`
    /// selects whether the second copy `ε` takes part.
    pub fn new(pp: &PartitionedProblem, rho: &[f64], beta: f64, eps_active: bool) -> Result<Self> {
        Self::with_coupling_units(pp, rho, beta, eps_active, pp.out1() && pp.m() > 1)
    }

    /// Like [`SolverCache::new`], but chooses whether the coupling projection
    /// is split per subsystem (only valid for out-1 partitions) or done per
    /// time block.
    pub fn with_coupling_units(pp: &PartitionedProblem, rho: &[f64], beta: f64, eps_active: bool, per_subsystem: bool) -> Result<Self> {
        let m = pp.m();
        if per_subsystem && !pp.out1() {
            return Err(Error::InvalidUseCase("per-subsystem coupling projection needs an out-1 partition".into()));
        }
        let per_subsystem = per_subsystem && m > 1;
        if rho.len() != m {
            return Err(Error::InvalidConfig(format!("{} penalty parameters for {m} subsystems", rho.len())));
        }
        if let Some(r) = rho.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidConfig(format!("penalty parameter {r} is not positive")));
        }
        let kkt = (0..m).map(|i| KktCache::new(pp, i, rho[i])).collect::<Result<Vec<_>>>()?;

        let mut projection_units = Vec::new();
        let mut dual_units = Vec::new();
        for (i, s) in pp.subsystems.iter().enumerate() {
            for k in 0..pp.horizon {
                let (u, _, x) = s.stage_offsets(k);
                let b = s.offset;
                projection_units.push((i, b + u..b + x, false));
                projection_units.push((i, b + x..b + x + s.nx, true));
                dual_units.push(b + u..b + x + s.nx);
            }
        }

        let ydim = pp.ydim();
        let mut coupling = Vec::new();
        if eps_active {
            let mut weight = vec![0.0; ydim];
            for (i, s) in pp.subsystems.iter().enumerate() {
                weight[s.offset..s.offset + s.ydim()].iter_mut().for_each(|w| *w = (1.0 - beta) * rho[i]);
            }
            let owner = |j: usize| pp.subsystems.iter().rposition(|s| s.offset <= j).unwrap();
            for (kb, range) in pp.time_blocks.iter().enumerate() {
                let block_vars: Vec<usize> = pp.perm[range.clone()].to_vec();
                let block_rows: Vec<usize> = (0..pp.coupling.len()).filter(|&r| pp.coupling[r].time == kb).collect();
                if !per_subsystem {
                    coupling.push(CouplingUnit::new(pp, block_rows, block_vars, &weight, kb)?);
                    continue;
                }
                let mut in_group = std::collections::HashSet::new();
                for &r in &block_rows {
                    in_group.extend(pp.coupling[r].entries.iter().map(|e| e.0));
                }
                for j in 0..m {
                    let rows: Vec<usize> = block_rows.iter().copied().filter(|&r| pp.coupling[r].subsystem == j).collect();
                    let mut vars: Vec<usize> = rows.iter().flat_map(|&r| pp.coupling[r].entries.iter().map(|e| e.0)).collect();
                    vars.extend(block_vars.iter().copied().filter(|&v| owner(v) == j && !in_group.contains(&v)));
                    if !vars.is_empty() {
                        coupling.push(CouplingUnit::new(pp, rows, vars, &weight, kb)?);
                    }
                }
            }
        }

        Ok(SolverCache {
            rho: rho.to_vec(),
            beta,
            kkt,
            coupling,
            projection_units,
            dual_units,
            eps_active,
            coupling_per_subsystem: per_subsystem,
        })
    }

    pub fn eps_active(&self) -> bool {
        self.eps_active
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Step 2.1 (or 1.1) for subsystem `i`: writes `y_i`.
    pub(crate) fn qp_unit<T: Tally>(&self, i: usize, st: &IterInput<'_>, yi: &mut [f64], t: &mut T) {
        let kc = &self.kkt[i];
        let r = kc.offset..kc.offset + kc.n;
        let (zeta, lz) = (&st.zeta[r.clone()], &st.lambda_zeta[r.clone()]);
        let mut v = vec![0.0; kc.n];
        let mut adds = 0u64;
        let mut muls = 0u64;
        if self.eps_active {
            let (eps, le) = (&st.eps[r.clone()], &st.lambda_eps[r]);
            let (b, b1) = (self.beta, 1.0 - self.beta);
            for j in 0..kc.n {
                v[j] = b * (lz[j] + zeta[j]) + b1 * (le[j] + eps[j]);
            }
            adds += 3 * kc.n as u64;
            muls += 2 * kc.n as u64;
        } else {
            for j in 0..kc.n {
                v[j] = lz[j] + zeta[j];
            }
            adds += kc.n as u64;
        }
        for (vj, &qj) in v.iter_mut().zip(&kc.neg_q_scaled) {
            if qj != 0.0 {
                *vj += qj;
                adds += 1;
            }
        }
        t.add(adds, muls);
        kc.solve(&mut v, yi, t);
    }

    /// Step 2.2 (or 1.2) on one projection unit, writing `ζ` on `range`.
    pub(crate) fn projection_unit<T: Tally>(&self, pp: &PartitionedProblem, unit: usize, y: &[f64], lambda: &[f64], zeta: &mut [f64], t: &mut T) {
        let (i, range, is_state) = &self.projection_units[unit];
        for (z, j) in zeta.iter_mut().zip(range.clone()) {
            *z = y[j] - lambda[j];
        }
        t.add(range.len() as u64, 0);
        let s = &pp.subsystems[*i];
        if *is_state {
            s.xset.project_in_place(zeta, t);
        } else {
            s.uset.project_in_place(&mut zeta[..s.nu], t);
        }
    }

    /// Step 2.3 on one coupling unit; returns the new `ε` values of `vars`.
    pub(crate) fn coupling_unit<T: Tally>(&self, unit: usize, y: &[f64], lambda: &[f64], t: &mut T) -> Vec<f64> {
        let cu = &self.coupling[unit];
        let mut v: Vec<f64> = cu.vars.iter().map(|&j| y[j] - lambda[j]).collect();
        t.add(v.len() as u64, 0);
        cu.project(&mut v, t);
        v
    }

    /// Step 2.4 (or 1.3) on one unit and copy.
    pub(crate) fn dual_unit<T: Tally>(&self, unit: usize, y: &[f64], copy: &[f64], lambda: &mut [f64], t: &mut T) {
        let range = self.dual_units[unit].clone();
        for j in range.clone() {
            lambda[j] -= y[j] - copy[j];
        }
        t.add(2 * range.len() as u64, 0);
    }

    /// Weighted projection onto `{ε : Dε = d}`; identity without coupling rows.
    pub fn coupling_projection(&self, v: &[f64]) -> Vec<f64> {
        let zero = vec![0.0; v.len()];
        let mut out = v.to_vec();
        for u in 0..self.coupling.len() {
            let vals = self.coupling_unit(u, v, &zero, &mut crate::ops::NoTally);
            for (&j, val) in self.coupling[u].vars.iter().zip(vals) {
                out[j] = val;
            }
        }
        out
    }

    /// Runs one iteration on a scratch copy of `state` with instrumented
    /// kernels and returns the per-unit counts.
    pub fn count_iteration(&self, pp: &PartitionedProblem, state: &super::AdmmState) -> IterationCounts {
        let mut s = state.clone();
        let mut counts = IterationCounts {
            coupling_per_subsystem: self.coupling_per_subsystem,
            coupling_blocks: self.coupling.iter().map(|c| c.block).collect(),
            ..Default::default()
        };
        super::iterate(pp, self, &mut s, false, Some(&mut counts));
        counts
    }
}

/// Read-only view of the iterate consumed by the subsystem QPs.
pub(crate) struct IterInput<'a> {
    pub zeta: &'a [f64],
    pub lambda_zeta: &'a [f64],
    pub eps: &'a [f64],
    pub lambda_eps: &'a [f64],
}
